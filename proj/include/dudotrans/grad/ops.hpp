#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dudotrans/grad/tensor.hpp"

// Differentiable primitives. Each one computes its output eagerly and, when a
// tape is active and any input requires a gradient, records its backward rule.
// Instantiated for float and double.

namespace dudotrans::grad {

/// Elementwise a + b. `b` may also match a trailing suffix of a's shape, in
/// which case it is broadcast over the leading dimensions.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
/// mean((a - b)^2)
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

/// a[..., M, K] x b[..., K, N]. Batch dimensions must be equal, or one side
/// must be a plain matrix that is broadcast over the other's batch.
/// With transpose_b, b is read as [..., N, K].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// x[..., in] w[out, in]^T + bias[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Stride-1 cross-correlation with zero padding (k - 1) / 2, k odd.
/// x[B, Ci, H, W], w[Co, Ci, k, k], bias[Co] (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Convolution with kernel = stride = p producing channels-last tokens.
/// x[B, Ci, H, W], w[Co, Ci, p, p], bias[Co] -> [B, H/p, W/p, Co].
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Transposed convolution with kernel = stride = p, the shape inverse of
/// patch_embed. x[B, h, w, Ci], w[Ci, Co, p, p], bias[Co] -> [B, Co, h p, w p].
template <typename T>
Tensor<T> patch_unembed(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// Softmax over the last dimension, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);

/// x[index] along the first dimension -> shape[1:].
template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t index);

/// Concatenation along dimension `axis`; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// x[B, H, W, C] -> [B * H/w * W/w, w * w, C], windows in row-major order.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window);
/// Inverse of window_partition for a [B, H, W, C] target.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t window, std::size_t batch, std::size_t height,
                         std::size_t width);

/// Cyclic shift of x[B, H, W, C]: out[(i + sh) mod H, (j + sw) mod W] = x[i, j].
template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, std::ptrdiff_t shift_h, std::ptrdiff_t shift_w);

/// Reflection-pad x[B, C, H, W] by pad_h rows at the bottom and pad_w columns at the right.
template <typename T>
Tensor<T> pad_reflect2d(const Tensor<T>& x, std::size_t pad_h, std::size_t pad_w);
/// Top-left crop of x[B, C, H, W] to [B, C, height, width].
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::size_t height, std::size_t width);

/// Rows of table[R, K] at `indices` -> [indices.size(), K].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& indices);

/// Applies a fixed linear operator given as a forward map and its transpose.
/// `forward` must overwrite its whole output; `adjoint` likewise.
template <typename T>
using LinearMap = std::function<void(std::span<const T> in, std::span<T> out)>;

template <typename T>
Tensor<T> apply_linear_map(const Tensor<T>& x, Shape out_shape, LinearMap<T> forward, LinearMap<T> adjoint);

}  // namespace dudotrans::grad
