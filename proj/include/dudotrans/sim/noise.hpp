#pragma once

#include <cstdint>

#include "dudotrans/common/rng.hpp"
#include "dudotrans/tomo/arrays.hpp"
#include "json.hpp"

namespace dudotrans::sim {

/// Mixed Poisson + Gaussian measurement noise.
struct NoiseConfig {
  double photons_i0 = 5e6;     // expected incident photons per detector bin
  double gauss_fraction = 0.05;  // post-log Gaussian sigma relative to max |Y|
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const NoiseConfig& c);
void from_json(const nlohmann::json& j, NoiseConfig& c);

/// Fan geometry with `views` uniformly spaced views over a full turn; every
/// other field is copied from `base`. Throws std::invalid_argument if views < 2.
tomo::ScanGeometry make_sparse_geometry(const tomo::ScanGeometry& base, std::size_t views);

/// Corrupt a clean fan sinogram:
///   counts ~ Poisson(I0 * exp(-Y)),  Y' = -ln(max(counts, 1) / I0),
///   Y' += N(0, (gauss_fraction * max|Y|)^2).
/// Bin (v, d) of item `item_index` draws from its own stream
/// make_stream(seed, {item_index, v, d}), so the output does not depend on the
/// order bins or items are processed in. The Gaussian term uses a separate
/// sub-stream from the Poisson term, so changing I0 leaves it untouched.
tomo::Sinogram add_noise(const tomo::Sinogram& sino, const NoiseConfig& cfg, std::uint64_t item_index = 0);

/// Exact Poisson sampler: inversion for small means, Hormann's PTRS
/// transformed rejection for means >= 10.
std::uint64_t sample_poisson(double mean, SplitMix64& rng);

}  // namespace dudotrans::sim
