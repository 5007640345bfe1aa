#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dudotrans/common/rng.hpp"
#include "dudotrans/grad/ops.hpp"

namespace dudotrans::testing {

template <typename T>
using TensorFn = std::function<grad::Tensor<T>(const std::vector<grad::Tensor<T>>&)>;

/// Central-difference step: 1e-2 for float32, 1e-5 for float64.
template <typename T>
constexpr T fd_step() {
  if constexpr (sizeof(T) == 4) return T(1e-2);
  else return T(1e-5);
}

/// Relative error tolerance for primitive checks: 1e-3 float32, 1e-6 float64.
template <typename T>
constexpr double fd_tolerance() {
  if constexpr (sizeof(T) == 4) return 1e-3;
  else return 1e-6;
}

template <typename T>
grad::Tensor<T> random_tensor(grad::Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  grad::Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Contracts f(inputs) with a fixed random cotangent R and compares the tape
/// gradient of sum(f * R) against central differences over every input entry.
/// Returns ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, 1e-12).
template <typename T>
double grad_check(const TensorFn<T>& f, std::vector<grad::Tensor<T>> inputs, std::uint64_t seed = 1,
                  T step = fd_step<T>()) {
  for (auto& x : inputs) x.set_requires_grad(true);

  grad::Tensor<T> cot;
  auto contract = [&](const grad::Tensor<T>& out) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += double(out.data()[i]) * double(cot.data()[i]);
    return s;
  };

  {
    grad::Tape<T> tape;
    grad::TapeScope<T> scope(tape);
    grad::Tensor<T> out = f(inputs);
    SplitMix64 rng(seed);
    cot = random_tensor<T>(out.shape(), rng);
    grad::backward(grad::sum(grad::mul(out, cot)));
  }

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  grad::NoGradScope<T> no_grad;
  for (auto& x : inputs) {
    std::vector<T> analytic(x.numel(), T(0));
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const T saved = x.data()[i];
      x.data()[i] = saved + step;
      const double up = contract(f(inputs));
      x.data()[i] = saved - step;
      const double down = contract(f(inputs));
      x.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * double(step));
      const double a = double(analytic[i]);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
  }
  return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
}

}  // namespace dudotrans::testing
