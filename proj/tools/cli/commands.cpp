#include "cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"

#include "cli/png_export.hpp"
#include "dudotrans/tomo/ctar.hpp"
#include "dudotrans/tomo/operators.hpp"

namespace fs = std::filesystem;

namespace dudotrans::cli {

namespace {

std::vector<std::string> ctar_names(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ctar") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::string join(const std::vector<std::string>& xs) {
  std::string s;
  for (const auto& x : xs) s += (s.empty() ? "" : ", ") + x;
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

sim::DatasetManifest open_manifest(const RunConfig& config) {
  if (!fs::exists(config.train.manifest)) throw UsageError("missing manifest: " + config.train.manifest);
  return sim::DatasetManifest::load(config.train.manifest);
}

int cmd_phantom(std::size_t count, std::size_t size, std::size_t detectors, std::uint64_t seed, const fs::path& out_dir,
                std::ostream& out) {
  if (count < 1) throw UsageError("phantom: --count must be >= 1");
  const auto g = tomo::ScanGeometry::desk(size, detectors);
  g.validate();
  fs::create_directories(out_dir);
  for (std::size_t k = 0; k < count; ++k) {
    const auto spec = k == 0 ? tomo::shepp_logan() : tomo::jittered_shepp_logan(seed, k);
    char name[64];
    std::snprintf(name, sizeof name, "phantom_%04zu.ctar", k);
    tomo::CtImage img = tomo::rasterize_phantom(spec, g);
    tomo::save_image(out_dir / name, img);
  }
  out << "wrote " << count << " phantoms to " << out_dir.string() << "\n";
  return kOk;
}

int cmd_simulate(std::size_t views, const sim::NoiseConfig& noise, double test_fraction, const fs::path& in_dir,
                 const fs::path& out_dir, std::ostream& out) {
  if (views < 2) throw UsageError("simulate: schema error: --views must be >= 2, got " + std::to_string(views));
  noise.validate();
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw UsageError("simulate: --test-fraction must be in [0, 1]");
  const auto names = ctar_names(in_dir);
  if (names.empty()) throw UsageError("simulate: no .ctar phantoms in " + in_dir.string());
  std::vector<tomo::CtImage> phantoms;
  for (const auto& n : names) phantoms.push_back(tomo::load_image(in_dir / n));
  const auto manifest = sim::build_dataset_from_images(phantoms, views, noise, out_dir, test_fraction);
  out << "simulated " << manifest.entries.size() << " items at " << views << " views into " << out_dir.string()
      << "\n";
  return kOk;
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir, bool strict, std::ostream& out) {
  const RunConfig config = load_run_config(config_path);
  if (config.method == model::Method::fbp) throw UsageError("train: method fbp has no parameters to train");
  const auto manifest = open_manifest(config);
  const auto geometry = dataset_geometry(manifest, config);
  const auto items = training_items(manifest, geometry);
  fs::create_directories(out_dir);
  nlohmann::json resolved = config;
  resolved["strict_deterministic"] = strict;
  write_text(out_dir / "run_config.json", resolved.dump(2) + "\n");
  const auto m = train_variant(config, config.method, geometry, items, out_dir);
  out << "trained " << model::to_string(config.method) << " (" << model::count_parameters(m) << " parameters) into "
      << out_dir.string() << "\n";
  return kOk;
}

int cmd_reconstruct(const std::string& ckpt, const fs::path& sino_path, const std::string& method_name,
                    const fs::path& out_path, const std::string& png, std::ostream& out) {
  model::Method method;
  try {
    method = model::parse_method(method_name);
  } catch (const std::exception& e) {
    throw UsageError(std::string("reconstruct: ") + e.what());
  }
  const tomo::Sinogram sino = tomo::load_sinogram(sino_path);
  tomo::CtImage image;
  if (method == model::Method::fbp) {
    image = reconstruct(nullptr, sino);
  } else {
    if (ckpt.empty()) throw UsageError("reconstruct: --ckpt is required for method " + method_name);
    model::Checkpoint ck = model::load_checkpoint(ckpt);
    if (ck.model.config().method != method) {
      throw UsageError(ckpt + ": checkpoint holds method " + model::to_string(ck.model.config().method) +
                       ", not " + method_name);
    }
    if (!(ck.model.config().geometry == sino.geometry)) {
      throw UsageError(sino_path.string() + ": sinogram geometry differs from the checkpoint's");
    }
    image = reconstruct(&ck.model, sino);
  }
  if (!image.pixels.all_finite()) {
    throw train::NumericalError("reconstruct: non-finite values in the output image");
  }
  tomo::save_image(out_path, image);
  if (!png.empty()) write_png(png, image.pixels);
  out << "wrote " << out_path.string() << "\n";
  return kOk;
}

int cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const fs::path& out_path, std::ostream& out) {
  const auto pred = ctar_names(pred_dir), gt = ctar_names(gt_dir);
  std::vector<std::string> missing_pred, missing_gt;
  std::set_difference(gt.begin(), gt.end(), pred.begin(), pred.end(), std::back_inserter(missing_pred));
  std::set_difference(pred.begin(), pred.end(), gt.begin(), gt.end(), std::back_inserter(missing_gt));
  if (!missing_pred.empty() || !missing_gt.empty()) {
    std::string msg = "eval: file sets differ.";
    if (!missing_pred.empty()) msg += " missing from " + pred_dir.string() + ": " + join(missing_pred) + ".";
    if (!missing_gt.empty()) msg += " missing from " + gt_dir.string() + ": " + join(missing_gt) + ".";
    throw UsageError(msg);
  }
  if (gt.empty()) throw UsageError("eval: no .ctar files in " + gt_dir.string());
  std::vector<metrics::MetricRow> rows;
  for (const auto& name : gt) {
    const auto p = tomo::load_image(pred_dir / name), g = tomo::load_image(gt_dir / name);
    if (p.pixels.rows != g.pixels.rows || p.pixels.cols != g.pixels.cols) {
      throw UsageError("eval: " + name + " has different sizes in the two directories");
    }
    rows.push_back(metrics::evaluate(name, p.pixels, g.pixels));
  }
  metrics::write_report(out_path, rows);
  const auto mean = metrics::mean_row(rows);
  out << "mean psnr " << mean.psnr << " ms_ssim " << mean.ms_ssim << " over " << rows.size() << " files\n";
  return kOk;
}

int cmd_ablate(const fs::path& config_path, const std::vector<std::string>& variant_names, const fs::path& out_path,
               std::ostream& out) {
  std::vector<model::Method> variants;
  for (const auto& v : variant_names) {
    try {
      variants.push_back(model::parse_method(v));
    } catch (const std::exception& e) {
      throw UsageError(std::string("ablate: ") + e.what());
    }
  }
  if (variants.empty()) throw UsageError("ablate: --variants is empty");
  if (std::set<model::Method>(variants.begin(), variants.end()).size() != variants.size()) {
    throw UsageError("ablate: duplicate variant");
  }
  const RunConfig config = load_run_config(config_path);
  const auto manifest = open_manifest(config);
  const auto geometry = dataset_geometry(manifest, config);
  const auto test = manifest.select(sim::Split::test);
  if (test.empty()) throw UsageError("ablate: the dataset has no test split");
  const bool learned = std::any_of(variants.begin(), variants.end(), [](auto m) { return m != model::Method::fbp; });
  const auto items = learned ? training_items(manifest, geometry) : std::vector<train::TrainItem>{};

  std::string csv = "variant,psnr,ms_ssim,rmse,param_count\n";
  for (model::Method method : variants) {
    SplitScore s;
    std::size_t params = 0;
    if (method == model::Method::fbp) {
      s = score_entries(nullptr, test, config.metrics);
    } else {
      const auto m = train_variant(config, method, geometry, items, {});
      s = score_entries(&m, test, config.metrics);
      params = model::count_parameters(m);
    }
    char line[256];
    std::snprintf(line, sizeof line, "%s,%.17g,%.17g,%.17g,%zu\n", model::to_string(method).c_str(), s.psnr,
                  s.ms_ssim, s.rmse, params);
    csv += line;
    out << line;
  }
  write_text(out_path, csv);
  return kOk;
}

}  // namespace

tomo::CtImage reconstruct(const model::DuDoTransModel* model, const tomo::Sinogram& sino) {
  if (!model || model->config().method == model::Method::fbp) return tomo::fbp(sino);
  grad::NoGradScope<Real> no_grad;
  const auto result = model::model_forward(model::to_tensor(sino.bins), *model);
  tomo::CtImage image;
  image.geometry = sino.geometry;
  image.pixels = model::to_array(result.image);
  return image;
}

SplitScore score_entries(const model::DuDoTransModel* model, const std::vector<const sim::ManifestEntry*>& entries,
                         const metrics::MetricConfig& cfg, const std::vector<tomo::Sinogram>& noisy_override) {
  if (entries.empty()) throw std::invalid_argument("score_entries: no entries");
  std::vector<metrics::MetricRow> rows;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = *entries[k];
    const tomo::Sinogram noisy = noisy_override.empty() ? tomo::load_sinogram(e.noisy_sino) : noisy_override.at(k);
    const tomo::CtImage gt = tomo::load_image(e.phantom);
    const tomo::CtImage rec = reconstruct(model, noisy);
    if (!rec.pixels.all_finite()) throw train::NumericalError("non-finite reconstruction of " + e.noisy_sino.string());
    rows.push_back(metrics::evaluate(e.phantom.filename().string(), rec.pixels, gt.pixels, cfg));
  }
  const auto mean = metrics::mean_row(rows);
  return {mean.psnr, mean.ms_ssim, mean.rmse, mean.ssim_levels_used};
}

tomo::ScanGeometry dataset_geometry(const sim::DatasetManifest& manifest, const RunConfig& config) {
  if (manifest.entries.empty()) throw UsageError("the manifest has no entries");
  const auto& first = manifest.entries.front();
  const tomo::ScanGeometry g = tomo::load_sinogram(first.noisy_sino).geometry;
  for (const auto& e : manifest.entries) {
    if (e.alpha_max != first.alpha_max) throw UsageError("manifest mixes view counts");
  }
  if (config.geometry && !(sim::make_sparse_geometry(*config.geometry, first.alpha_max) == g)) {
    throw UsageError("config geometry does not match the dataset geometry");
  }
  if (config.noise) {
    for (const auto& e : manifest.entries) {
      if (e.noise.photons_i0 != config.noise->photons_i0 || e.noise.gauss_fraction != config.noise->gauss_fraction ||
          e.noise.seed != config.noise->seed) {
        throw UsageError("config noise does not match the dataset's noise settings");
      }
    }
  }
  return g;
}

std::vector<train::TrainItem> training_items(const sim::DatasetManifest& manifest, const tomo::ScanGeometry& geometry) {
  auto items = train::load_items(manifest, sim::Split::train, geometry);
  if (items.empty()) throw UsageError("the dataset has no training items");
  return items;
}

model::DuDoTransModel train_variant(const RunConfig& config, model::Method method, const tomo::ScanGeometry& geometry,
                                    const std::vector<train::TrainItem>& items, const fs::path& out_dir,
                                    train::AdamState* adam_out) {
  auto m = model::DuDoTransModel::create(model_config(config, method, geometry));
  train::AdamState adam;
  adam.lr = config.train.lr;
  train::train_loop(m, items, config.train, adam, out_dir);
  if (!out_dir.empty()) model::save_checkpoint(out_dir / "final.ddtc", m, &adam);
  if (adam_out) *adam_out = adam;
  return m;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-domain sparse-view CT reconstruction toolkit", "dudotrans"};
  app.require_subcommand(1);
  bool strict = false;
  app.add_flag("--strict-deterministic", strict, "Sequential kernels and fixed reduction order (always true here)");

  std::size_t count = 1, size = 128, detectors = 256, views = 96;
  std::uint64_t seed = 0;
  double photons = 5e6, gauss = 0.05, test_fraction = 0.2;
  std::string out_path, in_dir, config_path, ckpt, sino, method = "dudotrans", png, pred, gt;
  std::vector<std::string> variants;

  auto* phantom = app.add_subcommand("phantom", "Write Shepp-Logan family phantoms");
  phantom->add_option("--count", count)->required();
  phantom->add_option("--size", size)->required();
  phantom->add_option("--detectors", detectors, "Detector count recorded in the scan geometry");
  phantom->add_option("--seed", seed);
  phantom->add_option("--out", out_path)->required();

  auto* simulate = app.add_subcommand("simulate", "Project phantoms to noisy sparse-view sinograms");
  simulate->add_option("--views", views)->required();
  simulate->add_option("--photons", photons);
  simulate->add_option("--gauss", gauss);
  simulate->add_option("--seed", seed);
  simulate->add_option("--test-fraction", test_fraction);
  simulate->add_option("--in", in_dir)->required();
  simulate->add_option("--out", out_path)->required();

  auto* trainc = app.add_subcommand("train", "Train a model from a run config");
  trainc->add_option("--config", config_path)->required();
  trainc->add_option("--out", out_path)->required();

  auto* recon = app.add_subcommand("reconstruct", "Reconstruct one sinogram");
  recon->add_option("--ckpt", ckpt);
  recon->add_option("--sino", sino)->required();
  recon->add_option("--method", method)->required();
  recon->add_option("--out", out_path)->required();
  recon->add_option("--png", png, "Optional windowed 8-bit PNG");

  auto* evalc = app.add_subcommand("eval", "Score predictions against ground truth");
  evalc->add_option("--pred", pred)->required();
  evalc->add_option("--gt", gt)->required();
  evalc->add_option("--out", out_path)->required();

  auto* ablate = app.add_subcommand("ablate", "Train and score several variants");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--variants", variants)->required()->delimiter(',');
  ablate->add_option("--out", out_path)->required();

  for (auto* sub : app.get_subcommands([](CLI::App*) { return true; })) {
    sub->add_flag("--strict-deterministic", strict, "Same as the global flag");
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "dudotrans: " << e.what() << "\n";
    return kDataError;
  }

  try {
    if (phantom->parsed()) return cmd_phantom(count, size, detectors, seed, out_path, out);
    if (simulate->parsed()) return cmd_simulate(views, {photons, gauss, seed}, test_fraction, in_dir, out_path, out);
    if (trainc->parsed()) return cmd_train(config_path, out_path, strict, out);
    if (recon->parsed()) return cmd_reconstruct(ckpt, sino, method, out_path, png, out);
    if (evalc->parsed()) return cmd_eval(pred, gt, out_path, out);
    if (ablate->parsed()) return cmd_ablate(config_path, variants, out_path, out);
  } catch (const train::NumericalError& e) {
    err << "dudotrans: numerical failure: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const std::exception& e) {
    err << "dudotrans: " << e.what() << "\n";
    return kDataError;
  }
  return kDataError;
}

}  // namespace dudotrans::cli
