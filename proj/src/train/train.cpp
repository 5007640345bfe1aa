#include "dudotrans/train/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "dudotrans/common/json_util.hpp"
#include "dudotrans/tomo/ctar.hpp"
#include "dudotrans/tomo/operators.hpp"

namespace dudotrans::train {

namespace {

constexpr std::uint64_t kShuffleStream = 0x53485546;  // "SHUF"

std::string format_row(std::size_t epoch, std::size_t item, const model::LossTerms& t, double total) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g", epoch, item, total, t.srt, t.dc, t.rirm);
  return buf;
}

void check_finite_grads(const nn::ParamList& params, std::size_t epoch, std::size_t item) {
  for (const nn::NamedParam& p : params) {
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericalError("non-finite gradient in " + p.name + " at epoch " + std::to_string(epoch) + ", item " +
                             std::to_string(item));
      }
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (checkpoint_interval < 1) throw std::invalid_argument("train: checkpoint_interval must be >= 1");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw std::invalid_argument("train: lambda1 and lambda2 must be >= 0");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be finite and >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},   {"batch_size", c.batch_size}, {"seed", c.seed},
                     {"manifest", c.manifest}, {"checkpoint_interval", c.checkpoint_interval},
                     {"lambda1", c.lambda1}, {"lambda2", c.lambda2},       {"lr", c.lr}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  check_keys(j, {"epochs", "batch_size", "seed", "manifest", "checkpoint_interval", "lambda1", "lambda2", "lr"},
             "train");
  TrainConfig out;
  out.epochs = j.value("epochs", out.epochs);
  out.batch_size = j.value("batch_size", out.batch_size);
  out.seed = j.value("seed", out.seed);
  out.manifest = j.value("manifest", out.manifest);
  out.checkpoint_interval = j.value("checkpoint_interval", out.checkpoint_interval);
  out.lambda1 = j.value("lambda1", out.lambda1);
  out.lambda2 = j.value("lambda2", out.lambda2);
  out.lr = j.value("lr", out.lr);
  out.validate();
  c = out;
}

TrainItem make_item(std::size_t index, std::string name, const tomo::Sinogram& noisy, const tomo::Sinogram& clean,
                    const tomo::CtImage& phantom) {
  if (!(noisy.geometry == clean.geometry)) throw std::invalid_argument(name + ": noisy and clean geometries differ");
  if (phantom.pixels.rows != noisy.geometry.image_rows || phantom.pixels.cols != noisy.geometry.image_cols) {
    throw std::invalid_argument(name + ": phantom size does not match the scan geometry");
  }
  TrainItem item;
  item.index = index;
  item.name = std::move(name);
  item.y_noisy = model::to_tensor(noisy.bins);
  item.y_clean = model::to_tensor(clean.bins);
  item.x_gt = model::to_tensor(phantom.pixels);
  item.x1 = model::to_tensor(tomo::fbp(noisy).pixels);
  return item;
}

std::vector<TrainItem> load_items(const sim::DatasetManifest& manifest, sim::Split split,
                                  const tomo::ScanGeometry& geometry) {
  std::vector<TrainItem> items;
  for (std::size_t k = 0; k < manifest.entries.size(); ++k) {
    const sim::ManifestEntry& e = manifest.entries[k];
    if (e.split != split) continue;
    const tomo::Sinogram noisy = tomo::load_sinogram(e.noisy_sino);
    if (!(noisy.geometry == geometry)) {
      throw std::invalid_argument(e.noisy_sino.string() + ": sinogram geometry does not match the model geometry");
    }
    items.push_back(make_item(k, e.noisy_sino.filename().string(), noisy, tomo::load_sinogram(e.clean_sino),
                              tomo::load_image(e.phantom)));
  }
  return items;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  SplitMix64 rng = make_stream(seed, {kShuffleStream, epoch});
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

double mean_loss(const model::DuDoTransModel& model, const std::vector<TrainItem>& items, double lambda1,
                 double lambda2) {
  grad::NoGradScope<Real> no_grad;
  double total = 0.0;
  for (const TrainItem& it : items) {
    const auto out = model::model_forward(it.y_noisy, model, it.x1);
    total += static_cast<double>(model::total_loss(out, it.y_clean, it.x_gt, lambda1, lambda2).total.item());
  }
  return total / static_cast<double>(items.size());
}

TrainResult train_loop(model::DuDoTransModel& model, const std::vector<TrainItem>& items, const TrainConfig& cfg,
                       AdamState& adam, const std::filesystem::path& out_dir) {
  cfg.validate();
  if (items.empty()) throw std::invalid_argument("train_loop: the training split is empty");
  if (model.config().method == model::Method::fbp) throw std::invalid_argument("train_loop: fbp has nothing to train");
  const nn::ParamList params = model.parameters();
  adam.lr = cfg.lr;

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir / "loss_log.csv", std::ios::trunc);
    if (!log) throw std::runtime_error((out_dir / "loss_log.csv").string() + ": cannot open for writing");
    log << kLossLogHeader << '\n';
  }

  TrainResult result;
  const Real batch_scale = Real(1) / static_cast<Real>(cfg.batch_size);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, items.size());
    double epoch_total = 0.0;
    std::size_t pending = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const TrainItem& item = items[order[k]];
      grad::Tape<Real> tape;
      model::LossTerms terms;
      {
        grad::TapeScope<Real> scope(tape);
        const auto out = model::model_forward(item.y_noisy, model, item.x1);
        terms = model::total_loss(out, item.y_clean, item.x_gt, cfg.lambda1, cfg.lambda2);
        const double total = static_cast<double>(terms.total.item());
        if (!std::isfinite(total)) {
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", item " +
                               std::to_string(item.index));
        }
        tape.backward(cfg.batch_size == 1 ? terms.total : grad::scale(terms.total, batch_scale));
      }
      const double total = static_cast<double>(terms.total.item());
      epoch_total += total;
      result.log_lines.push_back(format_row(epoch, item.index, terms, total));
      if (log) log << result.log_lines.back() << '\n';
      if (++pending == cfg.batch_size || k + 1 == order.size()) {
        check_finite_grads(params, epoch, item.index);
        adam_step(params, adam);
        zero_grads(params);
        pending = 0;
      }
    }
    result.epoch_mean_loss.push_back(epoch_total / static_cast<double>(items.size()));
    if (!out_dir.empty() && (epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs)) {
      const auto path = out_dir / ("ckpt_epoch" + std::to_string(epoch) + ".ddtc");
      model::save_checkpoint(path, model, &adam);
      result.checkpoints.push_back(path);
    }
  }
  if (log) {
    log.flush();
    if (!log) throw std::runtime_error((out_dir / "loss_log.csv").string() + ": write failed");
  }
  return result;
}

SmokeReport overfit_smoke(model::DuDoTransModel& model, const std::vector<TrainItem>& items, std::size_t steps,
                          double lr) {
  if (items.empty()) throw std::invalid_argument("overfit_smoke: no items");
  const double l1 = model.config().lambda1, l2 = model.config().lambda2;
  const nn::ParamList params = model.parameters();
  AdamState adam;
  adam.lr = lr;
  SmokeReport report;
  report.steps = steps;
  report.initial_loss = mean_loss(model, items, l1, l2);
  for (std::size_t s = 0; s < steps; ++s) {
    const TrainItem& item = items[s % items.size()];
    grad::Tape<Real> tape;
    grad::TapeScope<Real> scope(tape);
    const auto out = model::model_forward(item.y_noisy, model, item.x1);
    const auto terms = model::total_loss(out, item.y_clean, item.x_gt, l1, l2);
    if (!std::isfinite(terms.total.item())) throw NumericalError("non-finite loss at smoke step " + std::to_string(s));
    tape.backward(terms.total);
    adam_step(params, adam);
    zero_grads(params);
  }
  report.final_loss = mean_loss(model, items, l1, l2);
  report.passed = std::isfinite(report.final_loss) && report.final_loss <= 0.1 * report.initial_loss;
  return report;
}

}  // namespace dudotrans::train
