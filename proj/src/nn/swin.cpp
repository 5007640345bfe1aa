#include "dudotrans/nn/swin.hpp"

#include <cmath>
#include <stdexcept>

#include "dudotrans/common/json_util.hpp"

namespace dudotrans::nn {

using namespace grad;

namespace {

constexpr Real kMaskValue = Real(-100);

Tensor param(Shape shape) { return Tensor(std::move(shape), true); }

Tensor trunc_normal(Shape shape, double stddev, SplitMix64& rng) {
  Tensor t = param(std::move(shape));
  for (Real& v : t.data()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = static_cast<Real>(stddev * z);
  }
  return t;
}

Tensor uniform_fan_in(Shape shape, std::size_t fan_in, SplitMix64& rng) {
  Tensor t = param(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Real& v : t.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  return t;
}

Tensor ones(std::size_t n) { return Tensor::full({n}, Real(1), true); }
Tensor zeros(Shape shape) { return param(std::move(shape)); }

void push(ParamList& out, const std::string& name, const Tensor& t) { out.push_back({name, t}); }

}  // namespace

std::size_t count_scalars(const ParamList& params) {
  std::size_t n = 0;
  for (const NamedParam& p : params) n += p.tensor.numel();
  return n;
}

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

void StmConfig::validate() const {
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("StmConfig: embed_dim must be a positive multiple of num_heads");
  }
  if (window_size == 0) throw std::invalid_argument("StmConfig: window_size must be positive");
  if (shift >= window_size) throw std::invalid_argument("StmConfig: shift must be smaller than window_size");
  if (!(mlp_ratio > 0.0) || hidden_dim() == 0) throw std::invalid_argument("StmConfig: mlp_ratio must be positive");
}

std::size_t StmConfig::hidden_dim() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(embed_dim)));
}

void to_json(nlohmann::json& j, const StmConfig& c) {
  j = nlohmann::json{{"embed_dim", c.embed_dim},
                     {"num_heads", c.num_heads},
                     {"window_size", c.window_size},
                     {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, StmConfig& c) {
  check_keys(j, {"embed_dim", "num_heads", "window_size", "mlp_ratio"}, "stm");
  StmConfig out;
  out.embed_dim = j.value("embed_dim", out.embed_dim);
  out.num_heads = j.value("num_heads", out.num_heads);
  out.window_size = j.value("window_size", out.window_size);
  out.mlp_ratio = j.value("mlp_ratio", out.mlp_ratio);
  out.validate();
  c = out;
}

void WindowAttentionParams::collect(const std::string& prefix, ParamList& out) const {
  push(out, prefix + "qkv.w", qkv_w);
  push(out, prefix + "qkv.b", qkv_b);
  push(out, prefix + "proj.w", proj_w);
  push(out, prefix + "proj.b", proj_b);
  push(out, prefix + "bias_table", bias_table);
}

void StmParams::collect(const std::string& prefix, ParamList& out) const {
  push(out, prefix + "norm1.g", norm1_g);
  push(out, prefix + "norm1.b", norm1_b);
  attn.collect(prefix + "attn.", out);
  push(out, prefix + "norm2.g", norm2_g);
  push(out, prefix + "norm2.b", norm2_b);
  push(out, prefix + "fc1.w", fc1_w);
  push(out, prefix + "fc1.b", fc1_b);
  push(out, prefix + "fc2.w", fc2_w);
  push(out, prefix + "fc2.b", fc2_b);
}

void ConvParams::collect(const std::string& prefix, ParamList& out) const {
  push(out, prefix + "w", w);
  push(out, prefix + "b", b);
}

void ResidualBlockParams::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t j = 0; j < stms.size(); ++j) stms[j].collect(prefix + "stm" + std::to_string(j) + ".", out);
  conv.collect(prefix + "conv.", out);
}

void PatchEmbedParams::collect(const std::string& prefix, ParamList& out) const {
  push(out, prefix + "w", w);
  push(out, prefix + "b", b);
}

void PatchUnembedParams::collect(const std::string& prefix, ParamList& out) const {
  push(out, prefix + "w", w);
  push(out, prefix + "b", b);
}

StmParams init_stm(const StmConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  const std::size_t C = cfg.embed_dim, hid = cfg.hidden_dim(), w = cfg.window_size;
  StmParams p;
  p.norm1_g = ones(C);
  p.norm1_b = zeros({C});
  p.attn.qkv_w = trunc_normal({3 * C, C}, 0.02, rng);
  p.attn.qkv_b = zeros({3 * C});
  p.attn.proj_w = trunc_normal({C, C}, 0.02, rng);
  p.attn.proj_b = zeros({C});
  p.attn.bias_table = trunc_normal({(2 * w - 1) * (2 * w - 1), cfg.num_heads}, 0.02, rng);
  p.norm2_g = ones(C);
  p.norm2_b = zeros({C});
  p.fc1_w = trunc_normal({hid, C}, 0.02, rng);
  p.fc1_b = zeros({hid});
  p.fc2_w = trunc_normal({C, hid}, 0.02, rng);
  p.fc2_b = zeros({C});
  return p;
}

ConvParams init_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, SplitMix64& rng,
                     bool zero) {
  ConvParams p;
  p.w = zero ? zeros({out_channels, in_channels, kernel, kernel})
             : uniform_fan_in({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng);
  p.b = zeros({out_channels});
  return p;
}

ResidualBlockParams init_residual_block(const StmConfig& cfg, std::size_t width, SplitMix64& rng) {
  if (width == 0) throw std::invalid_argument("residual block needs at least one STM");
  ResidualBlockParams p;
  for (std::size_t j = 0; j < width; ++j) p.stms.push_back(init_stm(cfg, rng));
  p.conv = init_conv(cfg.embed_dim, cfg.embed_dim, 3, rng, true);
  return p;
}

PatchEmbedParams init_patch_embed(std::size_t in_channels, std::size_t channels, std::size_t patch, SplitMix64& rng) {
  PatchEmbedParams p;
  p.w = uniform_fan_in({channels, in_channels, patch, patch}, in_channels * patch * patch, rng);
  p.b = zeros({channels});
  return p;
}

PatchUnembedParams init_patch_unembed(std::size_t channels, std::size_t out_channels, std::size_t patch,
                                      SplitMix64& rng, bool zero) {
  PatchUnembedParams p;
  p.w = zero ? zeros({channels, out_channels, patch, patch})
             : uniform_fan_in({channels, out_channels, patch, patch}, channels, rng);
  p.b = zeros({out_channels});
  return p;
}

std::vector<std::size_t> shift_region_labels(std::size_t height, std::size_t width, std::size_t window,
                                             std::size_t shift) {
  std::vector<std::size_t> labels(height * width, 0);
  if (shift == 0) return labels;
  auto region = [&](std::size_t i, std::size_t n) -> std::size_t {
    if (i + window < n) return 0;
    if (i + shift < n) return 1;
    return 2;
  };
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) labels[y * width + x] = 3 * region(y, height) + region(x, width);
  return labels;
}

std::vector<Real> shift_attention_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift) {
  const std::size_t nh = height / window, nw = width / window, n = window * window;
  const auto labels = shift_region_labels(height, width, window, shift);
  std::vector<Real> mask(nh * nw * n * n, Real(0));
  std::vector<std::size_t> win_labels(n);
  for (std::size_t wi = 0; wi < nh; ++wi)
    for (std::size_t wj = 0; wj < nw; ++wj) {
      for (std::size_t t = 0; t < n; ++t) {
        win_labels[t] = labels[(wi * window + t / window) * width + wj * window + t % window];
      }
      Real* m = mask.data() + (wi * nw + wj) * n * n;
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) m[a * n + b] = win_labels[a] == win_labels[b] ? Real(0) : kMaskValue;
    }
  return mask;
}

std::vector<std::size_t> relative_position_index(std::size_t window) {
  const std::size_t n = window * window, span = 2 * window - 1;
  std::vector<std::size_t> index(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t dy = a / window + window - 1 - b / window;
      const std::size_t dx = a % window + window - 1 - b % window;
      index[a * n + b] = dy * span + dx;
    }
  return index;
}

Tensor window_msa(const Tensor& x, const WindowAttentionParams& params, const StmConfig& cfg, Tensor* attn_probs) {
  cfg.validate();
  if (x.rank() != 4 || x.dim(3) != cfg.embed_dim) {
    throw ShapeError("window_msa: expected [B, H, W, " + std::to_string(cfg.embed_dim) + "], got " +
                     shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = cfg.embed_dim;
  const std::size_t w = cfg.window_size, s = cfg.shift, heads = cfg.num_heads, d = cfg.head_dim();
  const std::size_t n = w * w, windows = (H / w) * (W / w);
  if (params.qkv_w.shape() != Shape{3 * C, C} || params.proj_w.shape() != Shape{C, C} ||
      params.bias_table.shape() != Shape{(2 * w - 1) * (2 * w - 1), heads}) {
    throw ShapeError("window_msa: parameter shapes do not match C=" + std::to_string(C) +
                     ", heads=" + std::to_string(heads) + ", w=" + std::to_string(w));
  }
  const auto sh = static_cast<std::ptrdiff_t>(s);

  Tensor xs = s ? roll2d(x, -sh, -sh) : x;
  Tensor win = window_partition(xs, w);
  const std::size_t total = win.dim(0);
  Tensor qkv = permute(reshape(linear(win, params.qkv_w, params.qkv_b), {total, n, 3, heads, d}), {2, 0, 3, 1, 4});
  Tensor q = scale(select(qkv, 0), static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d))));
  Tensor k = select(qkv, 1);
  Tensor v = select(qkv, 2);
  Tensor attn = matmul(q, k, true);

  Tensor bias = gather_rows(params.bias_table, relative_position_index(w));
  attn = add(attn, reshape(permute(bias, {1, 0}), {heads, n, n}));

  if (s) {
    const auto mask = shift_attention_mask(H, W, w, s);
    Tensor m({windows, heads, n, n});
    for (std::size_t i = 0; i < windows; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(mask.data() + i * n * n, n * n, m.data().data() + (i * heads + h) * n * n);
    attn = reshape(add(reshape(attn, {B, windows, heads, n, n}), m), {total, heads, n, n});
  }
  attn = softmax(attn);
  if (attn_probs) *attn_probs = attn;

  Tensor out = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {total, n, C});
  out = linear(out, params.proj_w, params.proj_b);
  out = window_reverse(out, w, B, H, W);
  return s ? roll2d(out, sh, sh) : out;
}

Tensor stm_forward(const Tensor& x, const StmParams& params, const StmConfig& cfg) {
  Tensor h = add(x, window_msa(layer_norm(x, params.norm1_g, params.norm1_b), params.attn, cfg));
  Tensor m = layer_norm(h, params.norm2_g, params.norm2_b);
  m = linear(gelu(linear(m, params.fc1_w, params.fc1_b)), params.fc2_w, params.fc2_b);
  return add(h, m);
}

Tensor conv_tokens(const Tensor& x, const ConvParams& conv) {
  return permute(conv2d(permute(x, {0, 3, 1, 2}), conv.w, conv.b), {0, 2, 3, 1});
}

Tensor residual_block(const Tensor& x, const ResidualBlockParams& params, const StmConfig& cfg,
                      std::size_t first_index) {
  if (params.stms.empty()) throw std::invalid_argument("residual_block: needs at least one STM");
  Tensor f = x;
  for (std::size_t j = 0; j < params.stms.size(); ++j) {
    StmConfig c = cfg;
    c.shift = (first_index + j) % 2 ? cfg.window_size / 2 : 0;
    f = stm_forward(f, params.stms[j], c);
  }
  return add(conv_tokens(f, params.conv), x);
}

Tensor embed_padded(const Tensor& x, const PatchEmbedParams& params, std::size_t multiple) {
  if (x.rank() != 4) throw ShapeError("embed_padded: expected [B, C, H, W], got " + shape_str(x.shape()));
  const std::size_t H = x.dim(2), W = x.dim(3);
  const std::size_t ph = round_up(H, multiple) - H, pw = round_up(W, multiple) - W;
  return patch_embed(ph || pw ? pad_reflect2d(x, ph, pw) : x, params.w, params.b);
}

Tensor unembed_cropped(const Tensor& tokens, const PatchUnembedParams& params, std::size_t height,
                       std::size_t width) {
  Tensor full = patch_unembed(tokens, params.w, params.b);
  if (full.dim(2) == height && full.dim(3) == width) return full;
  return crop2d(full, height, width);
}

}  // namespace dudotrans::nn
