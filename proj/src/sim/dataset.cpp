#include "dudotrans/sim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include "dudotrans/tomo/ctar.hpp"
#include "dudotrans/tomo/operators.hpp"
#include "json.hpp"

namespace dudotrans::sim {

namespace fs = std::filesystem;

namespace {

std::string item_name(const char* prefix, std::size_t k) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.ctar", prefix, k);
  return buf;
}

}  // namespace

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + text + "'");
}

std::vector<const ManifestEntry*> DatasetManifest::select(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

void DatasetManifest::save(const fs::path& path) const {
  const fs::path base = path.parent_path();
  nlohmann::json records = nlohmann::json::array();
  for (const auto& e : entries) {
    records.push_back({{"phantom", fs::relative(e.phantom, base).generic_string()},
                       {"clean_sino", fs::relative(e.clean_sino, base).generic_string()},
                       {"noisy_sino", fs::relative(e.noisy_sino, base).generic_string()},
                       {"alpha_max", e.alpha_max},
                       {"photons_i0", e.noise.photons_i0},
                       {"gauss_fraction", e.noise.gauss_fraction},
                       {"seed", e.noise.seed},
                       {"split", to_string(e.split)}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << records.dump(2) << '\n';
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open manifest");
  nlohmann::json records;
  try {
    records = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  if (!records.is_array()) throw std::runtime_error(path.string() + ": manifest must be a JSON array");
  const fs::path base = fs::absolute(path).parent_path();
  DatasetManifest manifest;
  std::set<fs::path> train_files;
  std::set<fs::path> test_files;
  for (const auto& r : records) {
    ManifestEntry e;
    try {
      e.phantom = base / r.at("phantom").get<std::string>();
      e.clean_sino = base / r.at("clean_sino").get<std::string>();
      e.noisy_sino = base / r.at("noisy_sino").get<std::string>();
      e.alpha_max = r.at("alpha_max").get<std::size_t>();
      e.noise.photons_i0 = r.at("photons_i0").get<double>();
      e.noise.gauss_fraction = r.at("gauss_fraction").get<double>();
      e.noise.seed = r.at("seed").get<std::uint64_t>();
      e.split = parse_split(r.at("split").get<std::string>());
    } catch (const std::exception& ex) {
      throw std::runtime_error(path.string() + ": bad manifest record: " + ex.what());
    }
    for (const fs::path& f : {e.phantom, e.clean_sino, e.noisy_sino}) {
      if (!fs::exists(f)) throw std::runtime_error(f.string() + ": referenced file does not exist");
      tomo::read_ctar(f);
      (e.split == Split::train ? train_files : test_files).insert(fs::weakly_canonical(f));
    }
    manifest.entries.push_back(std::move(e));
  }
  for (const auto& f : train_files) {
    if (test_files.count(f)) throw std::runtime_error(f.string() + ": shared between train and test splits");
  }
  return manifest;
}

DatasetManifest build_dataset_from_images(const std::vector<tomo::CtImage>& phantoms, std::size_t alpha_max,
                                          const NoiseConfig& noise, const fs::path& out_dir,
                                          double test_fraction) {
  if (phantoms.empty()) throw std::invalid_argument("build_dataset: no phantoms given");
  noise.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error(out_dir.string() + ": " + ec.message());

  const std::size_t n = phantoms.size();
  const auto test_count = static_cast<std::size_t>(std::lround(std::clamp(test_fraction, 0.0, 1.0) * n));
  DatasetManifest manifest;
  for (std::size_t k = 0; k < n; ++k) {
    tomo::CtImage phantom = phantoms[k];
    phantom.pixels = tomo::quantize_float32(phantom.pixels);
    phantom.geometry = make_sparse_geometry(phantom.geometry, alpha_max);
    tomo::Sinogram clean = tomo::forward_project(phantom);
    clean.bins = tomo::quantize_float32(clean.bins);
    tomo::Sinogram noisy = add_noise(clean, noise, k);

    ManifestEntry e;
    e.phantom = fs::absolute(out_dir / item_name("phantom", k));
    e.clean_sino = fs::absolute(out_dir / item_name("clean", k));
    e.noisy_sino = fs::absolute(out_dir / item_name("noisy", k));
    e.alpha_max = alpha_max;
    e.noise = noise;
    e.split = k + test_count >= n ? Split::test : Split::train;
    tomo::save_image(e.phantom, phantom);
    tomo::save_sinogram(e.clean_sino, clean);
    tomo::save_sinogram(e.noisy_sino, noisy);
    manifest.entries.push_back(std::move(e));
  }
  manifest.save(out_dir / "manifest.json");
  return manifest;
}

DatasetManifest build_dataset(const std::vector<tomo::PhantomSpec>& specs, const tomo::ScanGeometry& geometry,
                              std::size_t alpha_max, const NoiseConfig& noise, const fs::path& out_dir,
                              double test_fraction) {
  if (specs.empty()) throw std::invalid_argument("build_dataset: no phantom specs given");
  std::vector<tomo::CtImage> images;
  images.reserve(specs.size());
  for (const auto& spec : specs) images.push_back(tomo::rasterize_phantom(spec, geometry));
  return build_dataset_from_images(images, alpha_max, noise, out_dir, test_fraction);
}

}  // namespace dudotrans::sim
