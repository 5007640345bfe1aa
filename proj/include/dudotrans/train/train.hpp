#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dudotrans/model/model.hpp"
#include "dudotrans/sim/dataset.hpp"
#include "dudotrans/train/adam.hpp"

namespace dudotrans::train {

/// Raised when a loss or gradient becomes NaN or infinite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::string manifest;
  std::size_t checkpoint_interval = 10;  // epochs; the last epoch is always saved
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lr = 1e-4;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One training example as model tensors [1, 1, rows, cols]; x1 caches
/// fbp(y_noisy).
struct TrainItem {
  std::size_t index = 0;
  std::string name;
  model::Tensor y_noisy;
  model::Tensor y_clean;
  model::Tensor x_gt;
  model::Tensor x1;
};

TrainItem make_item(std::size_t index, std::string name, const tomo::Sinogram& noisy, const tomo::Sinogram& clean,
                    const tomo::CtImage& phantom);

/// Loads the entries of one split. Every sinogram must match `geometry`.
std::vector<TrainItem> load_items(const sim::DatasetManifest& manifest, sim::Split split,
                                  const tomo::ScanGeometry& geometry);

/// Order in which the items of `epoch` (1-based) are visited: a Fisher-Yates
/// shuffle driven by a stream derived from (seed, epoch).
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count);

struct TrainResult {
  std::vector<double> epoch_mean_loss;
  std::vector<std::string> log_lines;  // CSV rows without the header
  std::vector<std::filesystem::path> checkpoints;
};

inline constexpr const char* kLossLogHeader = "epoch,item,loss,loss_srt,loss_dc,loss_rirm";

/// Per epoch: visit items in epoch_order, forward, total loss, backward, and
/// one Adam step per batch_size items (the loss is divided by the batch
/// size), then zero gradients. With a non-empty out_dir writes loss_log.csv
/// and ckpt_epoch{N}.ddtc files. `adam` carries the optimizer across calls.
TrainResult train_loop(model::DuDoTransModel& model, const std::vector<TrainItem>& items, const TrainConfig& cfg,
                       AdamState& adam, const std::filesystem::path& out_dir = {});

/// Mean total loss over items without recording gradients.
double mean_loss(const model::DuDoTransModel& model, const std::vector<TrainItem>& items, double lambda1,
                 double lambda2);

struct SmokeReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  bool passed = false;
};

/// Fits the given items for `steps` Adam steps, cycling through them in
/// order. initial/final are mean_loss before and after; passes iff the final
/// loss is finite and at most 10% of the initial one.
SmokeReport overfit_smoke(model::DuDoTransModel& model, const std::vector<TrainItem>& items, std::size_t steps = 500,
                          double lr = 1e-4);

}  // namespace dudotrans::train
