#pragma once

#include <string>

#include "dudotrans/model/model.hpp"
#include "dudotrans/sim/noise.hpp"
#include "dudotrans/tomo/operators.hpp"
#include "dudotrans/tomo/phantom.hpp"
#include "dudotrans/train/train.hpp"

namespace dudotrans::testing {

/// Small but structurally complete model: C=8, 2 heads, w=4.
inline model::ModelConfig tiny_config(model::Method method, const tomo::ScanGeometry& g, std::uint64_t seed = 1) {
  model::ModelConfig c;
  c.method = method;
  c.geometry = g;
  c.seed = seed;
  c.srt.stm.embed_dim = 8;
  c.srt.stm.num_heads = 2;
  c.rirm.stm.embed_dim = 8;
  c.rirm.stm.num_heads = 2;
  c.srt.depth = 2;
  c.rirm.depth = 1;
  c.rirm.width = 2;
  return c;
}

/// Jittered phantom k on the sparse geometry, its clean and noisy sinograms.
inline train::TrainItem phantom_item(const tomo::ScanGeometry& g, std::size_t k, bool noisy = true,
                                     std::uint64_t seed = 7) {
  const tomo::PhantomSpec spec = k == 0 ? tomo::shepp_logan() : tomo::jittered_shepp_logan(seed, k);
  tomo::CtImage x = tomo::rasterize_phantom(spec, g);
  const tomo::Sinogram clean = tomo::forward_project(x);
  const tomo::Sinogram y = noisy ? sim::add_noise(clean, sim::NoiseConfig{5e6, 0.05, seed}, k) : clean;
  return train::make_item(k, "item" + std::to_string(k), y, clean, x);
}

/// Adds U(-a, a) to every parameter so zero-initialized exits become live.
inline void perturb(const model::DuDoTransModel& m, std::uint64_t seed, double a = 0.05) {
  SplitMix64 rng(seed);
  for (const auto& p : m.parameters()) {
    model::Tensor t = p.tensor;
    for (auto& v : t.data()) v += static_cast<Real>(rng.uniform(-a, a));
  }
}

}  // namespace dudotrans::testing
