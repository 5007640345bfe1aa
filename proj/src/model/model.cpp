#include "dudotrans/model/model.hpp"

#include <cmath>
#include <stdexcept>

#include "dudotrans/common/json_util.hpp"
#include "dudotrans/tomo/operators.hpp"

namespace dudotrans::model {

using namespace grad;

namespace {

constexpr std::uint64_t kInitStream = 0x4D4F44454C;  // "MODEL"

void check_branch(std::size_t depth, std::size_t width, std::size_t patch, const nn::StmConfig& stm,
                  const char* name) {
  if (depth == 0 || width == 0) throw std::invalid_argument(std::string(name) + ": depth and width must be >= 1");
  if (patch == 0) throw std::invalid_argument(std::string(name) + ": patch must be >= 1");
  stm.validate();
}

void require_nchw(const Tensor& t, std::size_t rows, std::size_t cols, const char* what) {
  if (t.rank() != 4 || t.dim(1) != 1 || t.dim(2) != rows || t.dim(3) != cols) {
    throw std::invalid_argument(std::string(what) + ": expected [B, 1, " + std::to_string(rows) + ", " +
                                std::to_string(cols) + "], got " + shape_str(t.shape()));
  }
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::fbp: return "fbp";
    case Method::imgtrans: return "imgtrans";
    case Method::dudotrans: return "dudotrans";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "fbp") return Method::fbp;
  if (text == "imgtrans") return Method::imgtrans;
  if (text == "dudotrans") return Method::dudotrans;
  throw std::invalid_argument("unknown method \"" + text + "\" (expected fbp, imgtrans or dudotrans)");
}

void SrtConfig::validate() const { check_branch(depth, width, patch, stm, "srt"); }
void RirmConfig::validate() const { check_branch(depth, width, patch, stm, "rirm"); }

void ModelConfig::validate() const {
  geometry.validate();
  srt.validate();
  rirm.validate();
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw std::invalid_argument("model: lambda1 and lambda2 must be >= 0");
}

void to_json(nlohmann::json& j, const SrtConfig& c) {
  j = nlohmann::json{{"depth", c.depth}, {"width", c.width}, {"patch", c.patch}, {"stm", c.stm}};
}

void from_json(const nlohmann::json& j, SrtConfig& c) {
  check_keys(j, {"depth", "width", "patch", "stm"}, "srt");
  SrtConfig out;
  out.depth = j.value("depth", out.depth);
  out.width = j.value("width", out.width);
  out.patch = j.value("patch", out.patch);
  if (j.contains("stm")) out.stm = j.at("stm").get<nn::StmConfig>();
  out.validate();
  c = out;
}

void to_json(nlohmann::json& j, const RirmConfig& c) {
  j = nlohmann::json{{"depth", c.depth}, {"width", c.width}, {"patch", c.patch}, {"stm", c.stm}};
}

void from_json(const nlohmann::json& j, RirmConfig& c) {
  check_keys(j, {"depth", "width", "patch", "stm"}, "rirm");
  RirmConfig out;
  out.depth = j.value("depth", out.depth);
  out.width = j.value("width", out.width);
  out.patch = j.value("patch", out.patch);
  if (j.contains("stm")) out.stm = j.at("stm").get<nn::StmConfig>();
  out.validate();
  c = out;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"method", to_string(c.method)}, {"geometry", c.geometry}, {"srt", c.srt},
                     {"rirm", c.rirm},                {"lambda1", c.lambda1},   {"lambda2", c.lambda2},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  check_keys(j, {"method", "geometry", "srt", "rirm", "lambda1", "lambda2", "seed"}, "model");
  ModelConfig out;
  if (j.contains("method")) out.method = parse_method(j.at("method").get<std::string>());
  if (j.contains("geometry")) out.geometry = j.at("geometry").get<tomo::ScanGeometry>();
  if (j.contains("srt")) out.srt = j.at("srt").get<SrtConfig>();
  if (j.contains("rirm")) out.rirm = j.at("rirm").get<RirmConfig>();
  out.lambda1 = j.value("lambda1", out.lambda1);
  out.lambda2 = j.value("lambda2", out.lambda2);
  out.seed = j.value("seed", out.seed);
  out.validate();
  c = out;
}

DuDoTransModel DuDoTransModel::create(const ModelConfig& config) {
  config.validate();
  DuDoTransModel m;
  m.config_ = config;
  if (config.method == Method::fbp) return m;
  SplitMix64 rng = make_stream(config.seed, {kInitStream});

  if (config.method == Method::dudotrans) {
    const SrtConfig& s = config.srt;
    const std::size_t C = s.stm.embed_dim;
    m.srt_.embed = nn::init_patch_embed(1, C, s.patch, rng);
    for (std::size_t i = 0; i < s.depth; ++i) m.srt_.blocks.push_back(nn::init_residual_block(s.stm, s.width, rng));
    m.srt_.conv_mid = nn::init_conv(C, C, 3, rng, false);
    m.srt_.unembed = nn::init_patch_unembed(C, 1, s.patch, rng, true);
  }

  const RirmConfig& r = config.rirm;
  const std::size_t C = r.stm.embed_dim;
  const std::size_t in_channels = config.method == Method::dudotrans ? 2 : 1;
  m.rirm_.shallow = nn::init_patch_embed(in_channels, C, r.patch, rng);
  for (std::size_t i = 0; i < r.depth; ++i) m.rirm_.deep.push_back(nn::init_residual_block(r.stm, r.width, rng));
  m.rirm_.recon = nn::init_patch_unembed(C, 1, r.patch, rng, true);
  return m;
}

ParamList DuDoTransModel::parameters() const {
  ParamList out;
  if (config_.method == Method::fbp) return out;
  if (config_.method == Method::dudotrans) {
    srt_.embed.collect("srt.embed.", out);
    for (std::size_t i = 0; i < srt_.blocks.size(); ++i) {
      srt_.blocks[i].collect("srt.block" + std::to_string(i) + ".", out);
    }
    srt_.conv_mid.collect("srt.conv_mid.", out);
    srt_.unembed.collect("srt.unembed.", out);
  }
  rirm_.shallow.collect("rirm.shallow.", out);
  for (std::size_t i = 0; i < rirm_.deep.size(); ++i) rirm_.deep[i].collect("rirm.deep" + std::to_string(i) + ".", out);
  rirm_.recon.collect("rirm.recon.", out);
  return out;
}

std::size_t count_parameters(const DuDoTransModel& model) { return nn::count_scalars(model.parameters()); }

Tensor to_tensor(const tomo::Array2D& a) {
  Tensor t({1, 1, a.rows, a.cols});
  for (std::size_t i = 0; i < a.data.size(); ++i) t.data()[i] = static_cast<Real>(a.data[i]);
  return t;
}

tomo::Array2D to_array(const Tensor& t) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1) {
    throw std::invalid_argument("to_array: expected [1, 1, rows, cols], got " + shape_str(t.shape()));
  }
  tomo::Array2D a(t.dim(2), t.dim(3));
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = static_cast<double>(t.data()[i]);
  return a;
}

namespace {

// Residual blocks of one branch, with shift alternation running across the
// whole stack.
Tensor run_blocks(Tensor f, const std::vector<nn::ResidualBlockParams>& blocks, const nn::StmConfig& stm,
                  std::size_t width) {
  for (std::size_t i = 0; i < blocks.size(); ++i) f = nn::residual_block(f, blocks[i], stm, i * width);
  return f;
}

}  // namespace

Tensor srt_forward(const Tensor& y, const DuDoTransModel& model) {
  const ModelConfig& cfg = model.config();
  if (cfg.method != Method::dudotrans) throw std::invalid_argument("srt_forward: model has no sinogram branch");
  require_nchw(y, cfg.geometry.num_views, cfg.geometry.num_detectors, "srt_forward");
  const SrtParams& p = model.srt();
  const SrtConfig& s = cfg.srt;
  Tensor f0 = nn::embed_padded(y, p.embed, s.patch * s.stm.window_size);
  Tensor fm = run_blocks(f0, p.blocks, s.stm, s.width);
  Tensor g = add(nn::conv_tokens(fm, p.conv_mid), f0);
  return add(y, nn::unembed_cropped(g, p.unembed, y.dim(2), y.dim(3)));
}

Tensor dudo_consistency(const Tensor& y, const tomo::ScanGeometry& geometry) {
  require_nchw(y, geometry.num_views, geometry.num_detectors, "dudo_consistency");
  const std::size_t B = y.dim(0);
  const std::size_t V = geometry.num_views, D = geometry.num_detectors;
  const std::size_t R = geometry.image_rows, C = geometry.image_cols;
  LinearMap<Real> forward = [=](std::span<const Real> in, std::span<Real> out) {
    for (std::size_t b = 0; b < B; ++b) {
      tomo::Sinogram s = tomo::Sinogram::zeros(geometry, tomo::SinogramKind::fan);
      for (std::size_t i = 0; i < V * D; ++i) s.bins.data[i] = static_cast<double>(in[b * V * D + i]);
      const tomo::CtImage img = tomo::fbp(s);
      for (std::size_t i = 0; i < R * C; ++i) out[b * R * C + i] = static_cast<Real>(img.pixels.data[i]);
    }
  };
  LinearMap<Real> adjoint = [=](std::span<const Real> in, std::span<Real> out) {
    for (std::size_t b = 0; b < B; ++b) {
      tomo::CtImage img = tomo::CtImage::zeros(geometry);
      for (std::size_t i = 0; i < R * C; ++i) img.pixels.data[i] = static_cast<double>(in[b * R * C + i]);
      const tomo::Sinogram s = tomo::fbp_adjoint(img);
      for (std::size_t i = 0; i < V * D; ++i) out[b * V * D + i] = static_cast<Real>(s.bins.data[i]);
    }
  };
  return apply_linear_map(y, {B, 1, R, C}, forward, adjoint);
}

Tensor rirm_forward(const Tensor& x1, const Tensor& x2, const DuDoTransModel& model) {
  const ModelConfig& cfg = model.config();
  if (cfg.method == Method::fbp) throw std::invalid_argument("rirm_forward: fbp model has no learned parts");
  const std::size_t rows = cfg.geometry.image_rows, cols = cfg.geometry.image_cols;
  require_nchw(x1, rows, cols, "rirm_forward");
  Tensor input = x1;
  if (cfg.method == Method::dudotrans) {
    require_nchw(x2, rows, cols, "rirm_forward");
    if (x2.dim(0) != x1.dim(0)) throw std::invalid_argument("rirm_forward: batch sizes differ");
    input = concat<Real>({x1, x2}, 1);
  }
  const RirmParams& p = model.rirm();
  const RirmConfig& r = cfg.rirm;
  Tensor f = nn::embed_padded(input, p.shallow, r.patch * r.stm.window_size);
  f = run_blocks(f, p.deep, r.stm, r.width);
  return add(nn::unembed_cropped(f, p.recon, rows, cols), x1);
}

ForwardResult model_forward(const Tensor& y_noisy, const DuDoTransModel& model, const Tensor& x1) {
  const ModelConfig& cfg = model.config();
  ForwardResult out;
  if (x1.defined()) {
    out.x1 = x1;
  } else {
    NoGradScope<Real> no_grad;
    out.x1 = dudo_consistency(y_noisy, cfg.geometry);
  }
  out.x1.set_requires_grad(false);
  switch (cfg.method) {
    case Method::fbp:
      out.image = out.x1;
      break;
    case Method::imgtrans:
      out.image = rirm_forward(out.x1, Tensor(), model);
      break;
    case Method::dudotrans:
      out.sino = srt_forward(y_noisy, model);
      out.x2 = dudo_consistency(out.sino, cfg.geometry);
      out.image = rirm_forward(out.x1, out.x2, model);
      break;
  }
  return out;
}

LossTerms total_loss(const ForwardResult& out, const Tensor& y_gt, const Tensor& x_gt, double lambda1,
                     double lambda2) {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw std::invalid_argument("total_loss: weights must be >= 0");
  auto term = [](const Tensor& a, const Tensor& b, const char* name) {
    if (a.shape() != b.shape()) {
      throw std::invalid_argument(std::string("total_loss: ") + name + " shape " + shape_str(a.shape()) +
                                  " does not match target " + shape_str(b.shape()));
    }
    return mse(a, b);
  };
  LossTerms terms;
  Tensor l_rirm = term(out.image, x_gt, "image");
  terms.rirm = static_cast<double>(l_rirm.item());
  if (!out.sino.defined()) {
    terms.total = l_rirm;
    return terms;
  }
  Tensor l_srt = term(out.sino, y_gt, "sinogram");
  Tensor l_dc = term(out.x2, x_gt, "consistency image");
  terms.srt = static_cast<double>(l_srt.item());
  terms.dc = static_cast<double>(l_dc.item());
  terms.total = add(add(l_srt, scale(l_dc, static_cast<Real>(lambda1))), scale(l_rirm, static_cast<Real>(lambda2)));
  return terms;
}

}  // namespace dudotrans::model
