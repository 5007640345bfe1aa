#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "cli/run_config.hpp"

namespace dudotrans::cli {

enum ExitCode : int { kOk = 0, kDataError = 2, kNumericalFailure = 3 };

/// Bad flags, configs or input data; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reconstruction of one fan sinogram: plain FBP when `model` is null.
tomo::CtImage reconstruct(const model::DuDoTransModel* model, const tomo::Sinogram& sino);

struct SplitScore {
  double psnr = 0.0;
  double ms_ssim = 0.0;
  double rmse = 0.0;
  std::size_t ssim_levels = 0;
};

/// Mean metrics of `reconstruct(model, noisy)` against the phantoms of the
/// given manifest entries. `noisy_override` replaces each entry's noisy
/// sinogram when non-empty (same order).
SplitScore score_entries(const model::DuDoTransModel* model, const std::vector<const sim::ManifestEntry*>& entries,
                         const metrics::MetricConfig& cfg, const std::vector<tomo::Sinogram>& noisy_override = {});

/// Sparse-view geometry shared by every entry of the manifest; throws
/// UsageError when entries disagree or do not match the config's optional
/// geometry and noise sections.
tomo::ScanGeometry dataset_geometry(const sim::DatasetManifest& manifest, const RunConfig& config);

/// The manifest's train split; throws UsageError when it is empty.
std::vector<train::TrainItem> training_items(const sim::DatasetManifest& manifest, const tomo::ScanGeometry& geometry);

/// Trains one model under `config`. With a non-empty out_dir also writes the
/// loss log, periodic checkpoints and final.ddtc.
model::DuDoTransModel train_variant(const RunConfig& config, model::Method method, const tomo::ScanGeometry& geometry,
                                    const std::vector<train::TrainItem>& items, const std::filesystem::path& out_dir,
                                    train::AdamState* adam_out = nullptr);

/// Entry point shared by main() and the tests. args excludes the program
/// name. Diagnostics go to `err`, progress to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dudotrans::cli
