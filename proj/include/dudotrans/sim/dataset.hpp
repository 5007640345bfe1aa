#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dudotrans/sim/noise.hpp"
#include "dudotrans/tomo/arrays.hpp"
#include "dudotrans/tomo/phantom.hpp"

namespace dudotrans::sim {

enum class Split { train, test };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestEntry {
  std::filesystem::path phantom;     // CTAR image
  std::filesystem::path clean_sino;  // noise-free fan sinogram at alpha_max views
  std::filesystem::path noisy_sino;  // add_noise(clean_sino)
  std::size_t alpha_max = 0;
  NoiseConfig noise;
  Split split = Split::train;
};

/// Paths inside a manifest file are relative to the manifest's directory;
/// in memory they are absolute.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> select(Split split) const;

  /// Writes the JSON array of records {phantom, clean_sino, noisy_sino,
  /// alpha_max, photons_i0, gauss_fraction, seed, split}.
  void save(const std::filesystem::path& path) const;
  /// Parses and checks that every referenced file exists and decodes, and that
  /// no file is shared between the train and test splits.
  static DatasetManifest load(const std::filesystem::path& path);
};

/// For each spec k: rasterize (stored at float32 precision), forward project on
/// the sparse geometry, add noise with item index k. The last
/// round(test_fraction * n) items are tagged test. Writes
/// phantom_k.ctar, clean_k.ctar, noisy_k.ctar and manifest.json into out_dir.
DatasetManifest build_dataset(const std::vector<tomo::PhantomSpec>& specs, const tomo::ScanGeometry& geometry,
                              std::size_t alpha_max, const NoiseConfig& noise,
                              const std::filesystem::path& out_dir, double test_fraction = 0.2);

/// Same pipeline starting from already rasterized phantom images (the
/// phantom files are rewritten into out_dir).
DatasetManifest build_dataset_from_images(const std::vector<tomo::CtImage>& phantoms, std::size_t alpha_max,
                                          const NoiseConfig& noise, const std::filesystem::path& out_dir,
                                          double test_fraction = 0.2);

}  // namespace dudotrans::sim
