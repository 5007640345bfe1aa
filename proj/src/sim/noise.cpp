#include "dudotrans/sim/noise.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dudotrans/common/json_util.hpp"

namespace dudotrans::sim {

namespace {

constexpr std::uint64_t kPoissonStream = 0;
constexpr std::uint64_t kGaussStream = 1;

std::uint64_t poisson_by_multiplication(double mean, SplitMix64& rng) {
  const double limit = std::exp(-mean);
  std::uint64_t k = 0;
  double prod = rng.uniform();
  while (prod > limit) {
    ++k;
    prod *= rng.uniform();
  }
  return k;
}

std::uint64_t poisson_ptrs(double mean, SplitMix64& rng) {
  const double slam = std::sqrt(mean);
  const double loglam = std::log(mean);
  const double b = 0.931 + 2.53 * slam;
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    const double u = rng.uniform() - 0.5;
    const double v = rng.uniform();
    const double us = 0.5 - std::abs(u);
    const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
        -mean + k * loglam - std::lgamma(k + 1.0)) {
      return static_cast<std::uint64_t>(k);
    }
  }
}

}  // namespace

void NoiseConfig::validate() const {
  if (!(photons_i0 > 0.0) || !std::isfinite(photons_i0)) {
    throw std::invalid_argument("NoiseConfig: photons_i0 must be positive");
  }
  if (!(gauss_fraction >= 0.0) || !std::isfinite(gauss_fraction)) {
    throw std::invalid_argument("NoiseConfig: gauss_fraction must be non-negative");
  }
}

void to_json(nlohmann::json& j, const NoiseConfig& c) {
  j = nlohmann::json{{"photons_i0", c.photons_i0}, {"gauss_fraction", c.gauss_fraction}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NoiseConfig& c) {
  check_keys(j, {"photons_i0", "gauss_fraction", "seed"}, "noise");
  NoiseConfig out;
  out.photons_i0 = j.value("photons_i0", out.photons_i0);
  out.gauss_fraction = j.value("gauss_fraction", out.gauss_fraction);
  out.seed = j.value("seed", out.seed);
  c = out;
}

tomo::ScanGeometry make_sparse_geometry(const tomo::ScanGeometry& base, std::size_t views) {
  if (views < 2) throw std::invalid_argument("make_sparse_geometry: alpha_max must be at least 2");
  tomo::ScanGeometry g = base;
  g.num_views = views;
  return g;
}

std::uint64_t sample_poisson(double mean, SplitMix64& rng) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) throw std::invalid_argument("sample_poisson: bad mean");
  if (mean == 0.0) return 0;
  return mean < 10.0 ? poisson_by_multiplication(mean, rng) : poisson_ptrs(mean, rng);
}

tomo::Sinogram add_noise(const tomo::Sinogram& sino, const NoiseConfig& cfg, std::uint64_t item_index) {
  cfg.validate();
  if (sino.kind != tomo::SinogramKind::fan) throw std::invalid_argument("add_noise: expected a fan sinogram");
  sino.check_shape();
  double peak = 0.0;
  for (double y : sino.bins.data) {
    if (!(y >= 0.0) || !std::isfinite(y)) {
      throw std::invalid_argument("add_noise: sinogram entries must be finite and non-negative");
    }
    peak = std::max(peak, y);
  }
  const double sigma = cfg.gauss_fraction * peak;

  tomo::Sinogram out = sino;
  for (std::size_t v = 0; v < sino.bins.rows; ++v) {
    for (std::size_t d = 0; d < sino.bins.cols; ++d) {
      const double y = sino.bins(v, d);
      SplitMix64 poisson = make_stream(cfg.seed, {item_index, v, d, kPoissonStream});
      const auto counts = sample_poisson(cfg.photons_i0 * std::exp(-y), poisson);
      double noisy = -std::log(static_cast<double>(std::max<std::uint64_t>(counts, 1)) / cfg.photons_i0);
      if (sigma > 0.0) {
        SplitMix64 gauss = make_stream(cfg.seed, {item_index, v, d, kGaussStream});
        noisy += sigma * gauss.normal();
      }
      out.bins(v, d) = noisy;
    }
  }
  return out;
}

}  // namespace dudotrans::sim
