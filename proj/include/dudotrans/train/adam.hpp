#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

#include "dudotrans/nn/swin.hpp"

namespace dudotrans::train {

/// Adam moments aligned with a ParamList (same order, same sizes).
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;

  void validate() const;
  /// Zeroed moments sized for `params`, t = 0.
  void reset(const nn::ParamList& params);
};

/// Hyperparameters and step counter only; moments travel as tensors.
void to_json(nlohmann::json& j, const AdamState& s);
void from_json(const nlohmann::json& j, AdamState& s);

/// One Adam update using each parameter's accumulated gradient (an absent
/// gradient counts as zero). t is incremented before bias correction:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2,
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
/// Moments are lazily sized on the first step.
void adam_step(const nn::ParamList& params, AdamState& state);

/// Zeroes every parameter gradient.
void zero_grads(const nn::ParamList& params);

}  // namespace dudotrans::train
