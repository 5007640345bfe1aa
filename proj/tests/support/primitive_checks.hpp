#pragma once

#include <string>
#include <vector>

#include "support/gradcheck.hpp"

namespace dudotrans::testing {

template <typename T>
struct PrimitiveCase {
  std::string name;
  std::vector<grad::Shape> inputs;
  TensorFn<T> fn;
};

/// One finite-difference case per differentiable primitive (and per
/// broadcasting or layout mode where the backward rule differs).
template <typename T>
std::vector<PrimitiveCase<T>> primitive_cases() {
  namespace g = dudotrans::grad;
  using V = std::vector<g::Tensor<T>>;
  const g::Tensor<T> none;

  // Fixed dense operator for apply_linear_map.
  SplitMix64 mrng(77);
  auto matrix = std::make_shared<std::vector<T>>(6 * 10);
  for (auto& v : *matrix) v = static_cast<T>(mrng.uniform(-1.0, 1.0));
  g::LinearMap<T> fwd = [matrix](std::span<const T> in, std::span<T> out) {
    for (std::size_t r = 0; r < 6; ++r) {
      T s = 0;
      for (std::size_t c = 0; c < 10; ++c) s += (*matrix)[r * 10 + c] * in[c];
      out[r] = s;
    }
  };
  g::LinearMap<T> adj = [matrix](std::span<const T> in, std::span<T> out) {
    for (std::size_t c = 0; c < 10; ++c) {
      T s = 0;
      for (std::size_t r = 0; r < 6; ++r) s += (*matrix)[r * 10 + c] * in[r];
      out[c] = s;
    }
  };

  return {
      {"add", {{3, 4}, {3, 4}}, [](const V& x) { return g::add(x[0], x[1]); }},
      {"add_broadcast", {{2, 3, 4}, {3, 4}}, [](const V& x) { return g::add(x[0], x[1]); }},
      {"add_bias", {{2, 3, 4}, {4}}, [](const V& x) { return g::add(x[0], x[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](const V& x) { return g::sub(x[0], x[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](const V& x) { return g::mul(x[0], x[1]); }},
      {"scale", {{5}}, [](const V& x) { return g::scale(x[0], T(-1.5)); }},
      {"sum", {{3, 4}}, [](const V& x) { return g::sum(x[0]); }},
      {"mean", {{3, 4}}, [](const V& x) { return g::mean(x[0]); }},
      {"mse", {{3, 4}, {3, 4}}, [](const V& x) { return g::mse(x[0], x[1]); }},
      {"matmul", {{3, 4}, {4, 2}}, [](const V& x) { return g::matmul(x[0], x[1]); }},
      {"matmul_batched", {{2, 3, 4}, {2, 4, 5}}, [](const V& x) { return g::matmul(x[0], x[1]); }},
      {"matmul_broadcast_rhs", {{2, 3, 4}, {4, 5}}, [](const V& x) { return g::matmul(x[0], x[1]); }},
      {"matmul_broadcast_lhs", {{3, 4}, {2, 4, 5}}, [](const V& x) { return g::matmul(x[0], x[1]); }},
      {"matmul_transpose_b", {{2, 3, 4}, {2, 5, 4}}, [](const V& x) { return g::matmul(x[0], x[1], true); }},
      {"linear", {{2, 3, 4}, {5, 4}, {5}}, [](const V& x) { return g::linear(x[0], x[1], x[2]); }},
      {"linear_no_bias", {{3, 4}, {2, 4}}, [none](const V& x) { return g::linear(x[0], x[1], none); }},
      {"conv2d", {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}}, [](const V& x) { return g::conv2d(x[0], x[1], x[2]); }},
      {"conv2d_1x1", {{2, 2, 3, 4}, {2, 2, 1, 1}}, [none](const V& x) { return g::conv2d(x[0], x[1], none); }},
      {"patch_embed", {{1, 2, 4, 6}, {3, 2, 2, 2}, {3}}, [](const V& x) { return g::patch_embed(x[0], x[1], x[2]); }},
      {"patch_unembed", {{1, 2, 3, 3}, {3, 2, 2, 2}, {2}},
       [](const V& x) { return g::patch_unembed(x[0], x[1], x[2]); }},
      {"layer_norm", {{3, 8}, {8}, {8}}, [](const V& x) { return g::layer_norm(x[0], x[1], x[2]); }},
      {"softmax", {{4, 6}}, [](const V& x) { return g::softmax(x[0]); }},
      {"gelu", {{12}}, [](const V& x) { return g::gelu(x[0]); }},
      {"reshape", {{2, 3, 4}}, [](const V& x) { return g::reshape(x[0], {6, 4}); }},
      {"permute", {{2, 3, 4}}, [](const V& x) { return g::permute(x[0], {2, 0, 1}); }},
      {"select", {{3, 2, 4}}, [](const V& x) { return g::select(x[0], 1); }},
      {"concat", {{2, 3}, {2, 2}}, [](const V& x) { return g::concat<T>({x[0], x[1]}, 1); }},
      {"concat_axis0", {{1, 3}, {2, 3}}, [](const V& x) { return g::concat<T>({x[0], x[1]}, 0); }},
      {"window_partition", {{1, 8, 8, 3}}, [](const V& x) { return g::window_partition(x[0], 4); }},
      {"window_reverse", {{4, 4, 2}}, [](const V& x) { return g::window_reverse(x[0], 2, 1, 4, 4); }},
      {"roll2d", {{1, 4, 5, 2}}, [](const V& x) { return g::roll2d(x[0], 1, -2); }},
      {"pad_reflect2d", {{1, 2, 5, 4}}, [](const V& x) { return g::pad_reflect2d(x[0], 3, 2); }},
      {"crop2d", {{1, 2, 5, 4}}, [](const V& x) { return g::crop2d(x[0], 3, 2); }},
      {"gather_rows", {{6, 3}}, [](const V& x) { return g::gather_rows(x[0], {0, 2, 2, 5, 1}); }},
      {"apply_linear_map", {{2, 5}},
       [fwd, adj](const V& x) { return g::apply_linear_map(x[0], {3, 2}, fwd, adj); }},
  };
}

/// Runs one case on fresh random inputs in [-1, 1]; returns the relative error.
template <typename T>
double run_primitive_case(const PrimitiveCase<T>& c, std::uint64_t seed = 5) {
  SplitMix64 rng(seed);
  std::vector<grad::Tensor<T>> inputs;
  for (const auto& shape : c.inputs) inputs.push_back(random_tensor<T>(shape, rng));
  return grad_check<T>(c.fn, inputs, seed + 1);
}

}  // namespace dudotrans::testing
