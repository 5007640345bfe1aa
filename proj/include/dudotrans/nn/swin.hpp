#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dudotrans/common/rng.hpp"
#include "dudotrans/grad/ops.hpp"
#include "dudotrans/grad/real.hpp"

namespace dudotrans::nn {

using Tensor = grad::Tensor<Real>;

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

std::size_t count_scalars(const ParamList& params);

/// Channels C, heads, window size w, shift (0 or w/2) and MLP expansion.
struct StmConfig {
  std::size_t embed_dim = 32;
  std::size_t num_heads = 4;
  std::size_t window_size = 4;
  std::size_t shift = 0;
  double mlp_ratio = 2.0;

  void validate() const;
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t hidden_dim() const;
  bool operator==(const StmConfig&) const = default;
};

void to_json(nlohmann::json& j, const StmConfig& c);
void from_json(const nlohmann::json& j, StmConfig& c);

struct WindowAttentionParams {
  Tensor qkv_w;       // [3C, C]
  Tensor qkv_b;       // [3C]
  Tensor proj_w;      // [C, C]
  Tensor proj_b;      // [C]
  Tensor bias_table;  // [(2w - 1)^2, heads]

  void collect(const std::string& prefix, ParamList& out) const;
};

struct StmParams {
  Tensor norm1_g, norm1_b;
  WindowAttentionParams attn;
  Tensor norm2_g, norm2_b;
  Tensor fc1_w, fc1_b;  // [hidden, C], [hidden]
  Tensor fc2_w, fc2_b;  // [C, hidden], [C]

  void collect(const std::string& prefix, ParamList& out) const;
};

struct ConvParams {
  Tensor w;  // [Co, Ci, k, k]
  Tensor b;  // [Co]
  void collect(const std::string& prefix, ParamList& out) const;
};

/// n STMs followed by a 3x3 convolution, wrapped in a skip connection.
struct ResidualBlockParams {
  std::vector<StmParams> stms;
  ConvParams conv;  // [C, C, 3, 3], zero at init

  void collect(const std::string& prefix, ParamList& out) const;
};

/// Kernel = stride = p convolution and its transposed partner.
struct PatchEmbedParams {
  Tensor w;  // [C, C0, p, p]
  Tensor b;  // [C]
  void collect(const std::string& prefix, ParamList& out) const;
};
struct PatchUnembedParams {
  Tensor w;  // [C, C0, p, p]
  Tensor b;  // [C0]
  void collect(const std::string& prefix, ParamList& out) const;
};

// Initialization: linear weights and the bias table ~ N(0, 0.02^2) clipped at
// two standard deviations, convolutions ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
// biases zero, layer norms (1, 0). `zero` makes a layer output exactly zero.
StmParams init_stm(const StmConfig& cfg, SplitMix64& rng);
ResidualBlockParams init_residual_block(const StmConfig& cfg, std::size_t width, SplitMix64& rng);
PatchEmbedParams init_patch_embed(std::size_t in_channels, std::size_t channels, std::size_t patch, SplitMix64& rng);
PatchUnembedParams init_patch_unembed(std::size_t channels, std::size_t out_channels, std::size_t patch,
                                      SplitMix64& rng, bool zero);
ConvParams init_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, SplitMix64& rng,
                     bool zero);

/// Label of the shift region each token of an H x W grid falls into, in the
/// rolled frame used by window attention. Tokens that share a window but not a
/// label must not attend to each other. All zeros when shift == 0.
std::vector<std::size_t> shift_region_labels(std::size_t height, std::size_t width, std::size_t window,
                                             std::size_t shift);

/// Additive attention mask [windows, w*w, w*w]: 0 within a region, -100 across.
std::vector<Real> shift_attention_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift);

/// Flattened index into the bias table for each (query, key) token pair of a
/// w x w window.
std::vector<std::size_t> relative_position_index(std::size_t window);

/// Shifted-window multi-head self-attention on x[B, H, W, C]. H and W must be
/// multiples of w. If `attn_probs` is given it receives the post-softmax
/// weights [B * windows, heads, w*w, w*w].
Tensor window_msa(const Tensor& x, const WindowAttentionParams& params, const StmConfig& cfg,
                  Tensor* attn_probs = nullptr);

/// x + WMSA(LN(x)), then + MLP(LN(.)).
Tensor stm_forward(const Tensor& x, const StmParams& params, const StmConfig& cfg);

/// F_out = conv(STM_n(...STM_1(F_in))) + F_in on tokens [B, H, W, C]. STM j
/// uses shift 0 for even j and w/2 for odd j, counted from `first_index`.
Tensor residual_block(const Tensor& x, const ResidualBlockParams& params, const StmConfig& cfg,
                      std::size_t first_index = 0);

/// 3x3 convolution applied to tokens [B, H, W, C].
Tensor conv_tokens(const Tensor& x, const ConvParams& conv);

/// Reflection-pads x[B, C0, H, W] up to multiples of `multiple`, then embeds
/// with patch size p. The original H, W are needed by unembed_cropped.
Tensor embed_padded(const Tensor& x, const PatchEmbedParams& params, std::size_t multiple);
Tensor unembed_cropped(const Tensor& tokens, const PatchUnembedParams& params, std::size_t height, std::size_t width);

/// Smallest multiple of m that is >= n.
std::size_t round_up(std::size_t n, std::size_t m);

}  // namespace dudotrans::nn
