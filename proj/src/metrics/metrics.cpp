#include "dudotrans/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "dudotrans/common/json_util.hpp"

namespace dudotrans::metrics {

namespace {

void check_same(const tomo::Array2D& a, const tomo::Array2D& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument(std::string(op) + ": shapes differ (" + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols) + ")");
  }
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  return g;
}

// Separable valid-mode filtering.
tomo::Array2D filter_valid(const tomo::Array2D& a, const std::vector<double>& g) {
  const std::size_t k = g.size();
  tomo::Array2D tmp(a.rows, a.cols - k + 1);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < tmp.cols; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * a(r, c + i);
      tmp(r, c) = s;
    }
  tomo::Array2D out(a.rows - k + 1, tmp.cols);
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * tmp(r + i, c);
      out(r, c) = s;
    }
  return out;
}

tomo::Array2D product(const tomo::Array2D& a, const tomo::Array2D& b) {
  tomo::Array2D out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return out;
}

tomo::Array2D pool2(const tomo::Array2D& a) {
  tomo::Array2D out(a.rows / 2, a.cols / 2);
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) {
      out(r, c) = 0.25 * (a(2 * r, 2 * c) + a(2 * r, 2 * c + 1) + a(2 * r + 1, 2 * c) + a(2 * r + 1, 2 * c + 1));
    }
  return out;
}

struct ScaleTerms {
  double ssim;
  double cs;
};

ScaleTerms ssim_terms(const tomo::Array2D& x, const tomo::Array2D& y, const std::vector<double>& g, double c1,
                      double c2) {
  const tomo::Array2D mx = filter_valid(x, g), my = filter_valid(y, g);
  const tomo::Array2D sxx = filter_valid(product(x, x), g), syy = filter_valid(product(y, y), g);
  const tomo::Array2D sxy = filter_valid(product(x, y), g);
  double ssim = 0.0, cs = 0.0;
  for (std::size_t i = 0; i < mx.data.size(); ++i) {
    const double mu1 = mx.data[i], mu2 = my.data[i];
    const double v1 = sxx.data[i] - mu1 * mu1, v2 = syy.data[i] - mu2 * mu2;
    const double cov = sxy.data[i] - mu1 * mu2;
    const double csv = (2.0 * cov + c2) / (v1 + v2 + c2);
    cs += csv;
    ssim += (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1) * csv;
  }
  const auto n = static_cast<double>(mx.data.size());
  return {ssim / n, cs / n};
}

}  // namespace

void MetricConfig::validate() const {
  if (!(data_range > 0.0)) throw std::invalid_argument("metrics: data_range must be positive");
  if (ssim_levels < 1 || ssim_levels > 5) throw std::invalid_argument("metrics: ssim_levels must be in 1..5");
  if (ssim_kernel == 0 || ssim_kernel % 2 == 0) throw std::invalid_argument("metrics: ssim_kernel must be odd");
  if (!(ssim_sigma > 0.0)) throw std::invalid_argument("metrics: ssim_sigma must be positive");
  for (double w : level_weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("metrics: level weights must be non-negative");
  }
  if (!(k1 > 0.0) || !(k2 > 0.0)) throw std::invalid_argument("metrics: k1 and k2 must be positive");
}

void to_json(nlohmann::json& j, const MetricConfig& c) {
  j = nlohmann::json{{"data_range", c.data_range}, {"ssim_levels", c.ssim_levels}, {"ssim_kernel", c.ssim_kernel},
                     {"ssim_sigma", c.ssim_sigma}, {"level_weights", c.level_weights}, {"k1", c.k1},
                     {"k2", c.k2}};
}

void from_json(const nlohmann::json& j, MetricConfig& c) {
  check_keys(j, {"data_range", "ssim_levels", "ssim_kernel", "ssim_sigma", "level_weights", "k1", "k2"}, "metrics");
  MetricConfig out;
  out.data_range = j.value("data_range", out.data_range);
  out.ssim_levels = j.value("ssim_levels", out.ssim_levels);
  out.ssim_kernel = j.value("ssim_kernel", out.ssim_kernel);
  out.ssim_sigma = j.value("ssim_sigma", out.ssim_sigma);
  out.level_weights = j.value("level_weights", out.level_weights);
  out.k1 = j.value("k1", out.k1);
  out.k2 = j.value("k2", out.k2);
  out.validate();
  c = out;
}

double mse(const tomo::Array2D& pred, const tomo::Array2D& gt) {
  check_same(pred, gt, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = pred.data[i] - gt.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.data.size());
}

double rmse(const tomo::Array2D& pred, const tomo::Array2D& gt) { return std::sqrt(mse(pred, gt)); }

double psnr(const tomo::Array2D& pred, const tomo::Array2D& gt, const MetricConfig& cfg) {
  cfg.validate();
  const double e = mse(pred, gt);
  if (e == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(cfg.data_range * cfg.data_range / e));
}

std::size_t feasible_levels(std::size_t rows, std::size_t cols, const MetricConfig& cfg) {
  const std::size_t m = std::min(rows, cols);
  std::size_t levels = 0;
  while (levels < cfg.ssim_levels && m >= cfg.ssim_kernel << levels) ++levels;
  return levels;
}

MsSsim ms_ssim(const tomo::Array2D& pred, const tomo::Array2D& gt, const MetricConfig& cfg) {
  cfg.validate();
  check_same(pred, gt, "ms_ssim");
  const std::size_t levels = feasible_levels(pred.rows, pred.cols, cfg);
  if (levels == 0) {
    throw std::invalid_argument("ms_ssim: image " + std::to_string(pred.rows) + "x" + std::to_string(pred.cols) +
                                " is smaller than the " + std::to_string(cfg.ssim_kernel) + "-tap window");
  }
  double wsum = 0.0;
  for (std::size_t l = 0; l < levels; ++l) wsum += cfg.level_weights[l];
  const auto g = gaussian_window(cfg.ssim_kernel, cfg.ssim_sigma);
  const double c1 = (cfg.k1 * cfg.data_range) * (cfg.k1 * cfg.data_range);
  const double c2 = (cfg.k2 * cfg.data_range) * (cfg.k2 * cfg.data_range);

  tomo::Array2D x = pred, y = gt;
  double value = 1.0;
  for (std::size_t l = 0; l < levels; ++l) {
    const ScaleTerms t = ssim_terms(x, y, g, c1, c2);
    const double w = cfg.level_weights[l] / wsum;
    const double term = l + 1 < levels ? t.cs : t.ssim;
    value *= std::pow(std::max(term, 0.0), w);
    if (l + 1 < levels) {
      x = pool2(x);
      y = pool2(y);
    }
  }
  return {value, levels};
}

MetricRow evaluate(const std::string& name, const tomo::Array2D& pred, const tomo::Array2D& gt,
                   const MetricConfig& cfg) {
  const MsSsim s = ms_ssim(pred, gt, cfg);
  return {name, psnr(pred, gt, cfg), s.value, s.levels_used, rmse(pred, gt)};
}

MetricRow mean_row(const std::vector<MetricRow>& rows) {
  MetricRow m{"mean", 0.0, 0.0, 0, 0.0};
  if (rows.empty()) return m;
  double levels = 0.0;
  for (const MetricRow& r : rows) {
    m.psnr += r.psnr;
    m.ms_ssim += r.ms_ssim;
    m.rmse += r.rmse;
    levels += static_cast<double>(r.ssim_levels_used);
  }
  const auto n = static_cast<double>(rows.size());
  m.psnr /= n;
  m.ms_ssim /= n;
  m.rmse /= n;
  m.ssim_levels_used = static_cast<std::size_t>(std::lround(levels / n));
  return m;
}

void write_report(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << "file,psnr,ms_ssim,ssim_levels_used,rmse\n";
  auto line = [&](const MetricRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%zu,%.17g\n", r.file.c_str(), r.psnr, r.ms_ssim,
                  r.ssim_levels_used, r.rmse);
    out << buf;
  };
  for (const MetricRow& r : rows) line(r);
  line(mean_row(rows));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

}  // namespace dudotrans::metrics
