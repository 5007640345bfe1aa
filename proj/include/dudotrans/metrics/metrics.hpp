#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "dudotrans/tomo/arrays.hpp"

namespace dudotrans::metrics {

struct MetricConfig {
  double data_range = 1.0;
  std::size_t ssim_levels = 5;
  std::size_t ssim_kernel = 11;
  double ssim_sigma = 1.5;
  std::array<double, 5> level_weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  double k1 = 0.01;
  double k2 = 0.03;

  void validate() const;
  bool operator==(const MetricConfig&) const = default;
};

void to_json(nlohmann::json& j, const MetricConfig& c);
void from_json(const nlohmann::json& j, MetricConfig& c);

constexpr double kPsnrCap = 99.0;

/// 10 log10(range^2 / MSE), capped at 99 dB (identical images hit the cap).
double psnr(const tomo::Array2D& pred, const tomo::Array2D& gt, const MetricConfig& cfg = {});
double rmse(const tomo::Array2D& pred, const tomo::Array2D& gt);
double mse(const tomo::Array2D& pred, const tomo::Array2D& gt);

/// Largest L <= cfg.ssim_levels with min(H, W) >= kernel * 2^(L - 1); 0 if none.
std::size_t feasible_levels(std::size_t rows, std::size_t cols, const MetricConfig& cfg = {});

struct MsSsim {
  double value = 0.0;
  std::size_t levels_used = 0;
};

/// Multi-scale SSIM. Gaussian window with valid filtering, 2x2 mean pooling
/// between scales, contrast-structure terms at every scale but the last and
/// the full SSIM at the coarsest one; negative terms are clamped to zero
/// before the weighted product. Level count auto-reduces to what the image
/// supports and weights are renormalized over the levels used.
MsSsim ms_ssim(const tomo::Array2D& pred, const tomo::Array2D& gt, const MetricConfig& cfg = {});

struct MetricRow {
  std::string file;
  double psnr = 0.0;
  double ms_ssim = 0.0;
  std::size_t ssim_levels_used = 0;
  double rmse = 0.0;
};

MetricRow evaluate(const std::string& name, const tomo::Array2D& pred, const tomo::Array2D& gt,
                   const MetricConfig& cfg = {});

/// Arithmetic mean of the rows, labelled "mean".
MetricRow mean_row(const std::vector<MetricRow>& rows);

/// CSV with header file,psnr,ms_ssim,ssim_levels_used,rmse; the rows followed
/// by their mean row.
void write_report(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

}  // namespace dudotrans::metrics
