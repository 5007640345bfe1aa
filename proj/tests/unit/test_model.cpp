#include <cmath>

#include "doctest.h"

#include "dudotrans/model/model.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace dudotrans;
using namespace dudotrans::model;
using grad::Shape;
using testing::phantom_item;
using testing::tiny_config;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

double grad_norm(const Tensor& t) {
  if (!t.has_grad()) return 0.0;
  double s = 0.0;
  for (Real g : t.grad()) s += double(g) * g;
  return std::sqrt(s);
}

Tensor fbp_tensor(const Tensor& y, const tomo::ScanGeometry& g) {
  tomo::Sinogram s = tomo::Sinogram::zeros(g, tomo::SinogramKind::fan);
  s.bins = to_array(y);
  return to_tensor(tomo::fbp(s).pixels);
}

// Closed-form parameter counts, independent of the collect() enumeration.
std::size_t stm_count(const nn::StmConfig& c, std::size_t w) {
  const std::size_t C = c.embed_dim, H = c.hidden_dim();
  return 2 * C + (3 * C * C + 3 * C) + (C * C + C) + (2 * w - 1) * (2 * w - 1) * c.num_heads + 2 * C +
         (H * C + H) + (C * H + C);
}
std::size_t block_count(const nn::StmConfig& c, std::size_t width) {
  return width * stm_count(c, c.window_size) + 9 * c.embed_dim * c.embed_dim + c.embed_dim;
}
std::size_t closed_form(const ModelConfig& cfg) {
  if (cfg.method == Method::fbp) return 0;
  std::size_t n = 0;
  if (cfg.method == Method::dudotrans) {
    const auto& s = cfg.srt;
    const std::size_t C = s.stm.embed_dim, pp = s.patch * s.patch;
    n += C * pp + C + s.depth * block_count(s.stm, s.width) + 9 * C * C + C + C * pp + 1;
  }
  const auto& r = cfg.rirm;
  const std::size_t C = r.stm.embed_dim, pp = r.patch * r.patch;
  const std::size_t cin = cfg.method == Method::dudotrans ? 2 : 1;
  n += cin * C * pp + C + r.depth * block_count(r.stm, r.width) + C * pp + 1;
  return n;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("json round trip and strictness") {
    ModelConfig c = tiny_config(Method::imgtrans, tomo::ScanGeometry::desk(32, 64, 24));
    c.lambda1 = 0.5;
    const nlohmann::json j = c;
    CHECK(j.get<ModelConfig>() == c);
    nlohmann::json extra = j;
    extra["srt"]["unknown"] = 1;
    CHECK_THROWS(extra.get<ModelConfig>());
    nlohmann::json bad_method = j;
    bad_method["method"] = "unet";
    CHECK_THROWS(bad_method.get<ModelConfig>());
    CHECK(parse_method("dudotrans") == Method::dudotrans);
    CHECK(to_string(Method::imgtrans) == "imgtrans");
  }

  TEST_CASE("validation") {
    ModelConfig c = tiny_config(Method::dudotrans, tomo::ScanGeometry::desk(32, 64, 24));
    c.srt.depth = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config(Method::dudotrans, tomo::ScanGeometry::desk(32, 64, 24));
    c.rirm.patch = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config(Method::dudotrans, tomo::ScanGeometry::desk(32, 64, 24));
    c.lambda2 = -1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
}

TEST_SUITE("parameter count") {
  TEST_CASE("matches the closed form") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    for (Method m : {Method::fbp, Method::imgtrans, Method::dudotrans}) {
      const ModelConfig c = tiny_config(m, g);
      CHECK(count_parameters(DuDoTransModel::create(c)) == closed_form(c));
    }
    ModelConfig d;
    d.geometry = g;
    CHECK(count_parameters(DuDoTransModel::create(d)) == closed_form(d));
  }

  TEST_CASE("fbp has no parameters and the default stays under a million") {
    ModelConfig c;
    c.method = Method::fbp;
    CHECK(count_parameters(DuDoTransModel::create(c)) == 0);
    const auto n = count_parameters(DuDoTransModel::create(ModelConfig{}));
    MESSAGE("default parameter count: " << n);
    CHECK(n < 1000000);
  }

  TEST_CASE("doubling C roughly quadruples the attention projections") {
    auto attention = [](std::size_t C) {
      nn::StmConfig c;
      c.embed_dim = C;
      SplitMix64 rng(1);
      const auto p = nn::init_stm(c, rng);
      return p.attn.qkv_w.numel() + p.attn.qkv_b.numel() + p.attn.proj_w.numel() + p.attn.proj_b.numel();
    };
    const double ratio = double(attention(64)) / double(attention(32));
    CHECK(ratio > 3.8);
    CHECK(ratio <= 4.0);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("identity at initialization") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    const auto item = phantom_item(g, 1);
    for (Method m : {Method::fbp, Method::imgtrans, Method::dudotrans}) {
      const auto model = DuDoTransModel::create(tiny_config(m, g));
      const ForwardResult out = model_forward(item.y_noisy, model);
      CHECK(bitwise_equal(out.image, fbp_tensor(item.y_noisy, g)));
      CHECK(bitwise_equal(out.x1, out.image));
      if (m == Method::dudotrans) {
        CHECK(bitwise_equal(out.sino, item.y_noisy));
        CHECK(bitwise_equal(rirm_forward(out.x1, out.x2, model), out.x1));
      } else {
        CHECK(!out.sino.defined());
      }
    }
  }

  TEST_CASE("sinogram branch preserves shape for every view count") {
    for (std::size_t views : {24u, 72u, 96u, 144u}) {
      const auto g = tomo::ScanGeometry::desk(32, 64, views);
      auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
      testing::perturb(model, views);
      SplitMix64 rng(views);
      const Tensor y = testing::random_tensor<Real>({1, 1, views, 64}, rng, 0.0, 1.0);
      CHECK(srt_forward(y, model).shape() == y.shape());
      const auto out = model_forward(y, model);
      CHECK(out.image.shape() == Shape{1, 1, 32, 32});
      CHECK(out.x2.shape() == Shape{1, 1, 32, 32});
    }
  }

  TEST_CASE("deterministic") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    testing::perturb(model, 3);
    const auto item = phantom_item(g, 2);
    CHECK(bitwise_equal(model_forward(item.y_noisy, model).image, model_forward(item.y_noisy, model).image));
    const auto again = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    const auto first = DuDoTransModel::create(tiny_config(Method::dudotrans, g)).parameters();
    for (std::size_t k = 0; k < first.size(); ++k) CHECK(bitwise_equal(first[k].tensor, again.parameters()[k].tensor));
  }

  TEST_CASE("shape mismatch is rejected") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    const auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    CHECK_THROWS(model_forward(Tensor({1, 1, 25, 64}), model));
  }
}

TEST_SUITE("consistency layer") {
  TEST_CASE("zero in, zero out and linearity") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    const Tensor zero = dudo_consistency(Tensor({1, 1, 24, 64}), g);
    for (Real v : zero.data()) CHECK(v == 0);
    SplitMix64 rng(4);
    const Tensor a = testing::random_tensor<Real>({1, 1, 24, 64}, rng, 0.0, 1.0);
    const Tensor b = testing::random_tensor<Real>({1, 1, 24, 64}, rng, 0.0, 1.0);
    const Tensor mix = grad::add(grad::scale(a, Real(0.6)), grad::scale(b, Real(-1.4)));
    const Tensor lhs = dudo_consistency(mix, g);
    const Tensor rhs = grad::add(grad::scale(dudo_consistency(a, g), Real(0.6)),
                                 grad::scale(dudo_consistency(b, g), Real(-1.4)));
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < lhs.numel(); ++i) {
      err = std::max(err, std::abs(double(lhs.data()[i]) - rhs.data()[i]));
      scale = std::max(scale, std::abs(double(rhs.data()[i])));
    }
    CHECK(err / scale < 1e-5);
  }

  TEST_CASE("tape gradient of the squared norm is 2 fbp^T fbp") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    SplitMix64 rng(5);
    Tensor y = testing::random_tensor<Real>({1, 1, 24, 64}, rng, 0.0, 1.0);
    y.set_requires_grad(true);
    {
      grad::Tape<Real> tape;
      grad::TapeScope<Real> scope(tape);
      const Tensor x = dudo_consistency(y, g);
      grad::backward(grad::sum(grad::mul(x, x)));
    }
    tomo::Sinogram s = tomo::Sinogram::zeros(g, tomo::SinogramKind::fan);
    s.bins = to_array(y);
    tomo::CtImage x = tomo::fbp(s);
    for (double& v : x.pixels.data) v *= 2.0;
    const tomo::Sinogram want = tomo::fbp_adjoint(x);
    double diff2 = 0.0, norm2 = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) {
      diff2 += (y.grad()[i] - want.bins.data[i]) * (y.grad()[i] - want.bins.data[i]);
      norm2 += want.bins.data[i] * want.bins.data[i];
    }
    CHECK(std::sqrt(diff2 / norm2) < 1e-4);
  }
}

TEST_SUITE("rirm") {
  TEST_CASE("gradients reach both image inputs") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    testing::perturb(model, 6);
    SplitMix64 rng(6);
    Tensor x1 = testing::random_tensor<Real>({1, 1, 32, 32}, rng);
    Tensor x2 = testing::random_tensor<Real>({1, 1, 32, 32}, rng);
    x1.set_requires_grad(true);
    x2.set_requires_grad(true);
    grad::Tape<Real> tape;
    grad::TapeScope<Real> scope(tape);
    const Tensor out = rirm_forward(x1, x2, model);
    CHECK(out.shape() == x1.shape());
    grad::backward(grad::sum(grad::mul(out, out)));
    CHECK(grad_norm(x1) > 0.0);
    CHECK(grad_norm(x2) > 0.0);
  }
}

TEST_SUITE("loss") {
  TEST_CASE("hand cases") {
    ForwardResult out;
    out.sino = Tensor::full({1, 1, 4, 6}, 1);
    out.x2 = Tensor::full({1, 1, 5, 5}, 1);
    out.image = Tensor::full({1, 1, 5, 5}, 1);
    const Tensor y0({1, 1, 4, 6});
    const Tensor x0({1, 1, 5, 5});
    const LossTerms t = total_loss(out, y0, x0, 1.0, 1.0);
    CHECK(t.total.item() == doctest::Approx(3.0));
    CHECK(total_loss(out, out.sino, out.image, 1.0, 1.0).total.item() == 0.0);

    SplitMix64 rng(7);
    out.sino = testing::random_tensor<Real>({1, 1, 4, 6}, rng);
    out.x2 = testing::random_tensor<Real>({1, 1, 5, 5}, rng);
    out.image = testing::random_tensor<Real>({1, 1, 5, 5}, rng);
    const LossTerms a = total_loss(out, y0, x0, 0.7, 1.3);
    const LossTerms b = total_loss(out, y0, x0, 1.4, 1.3);
    CHECK(b.total.item() - a.total.item() == doctest::Approx(0.7 * a.dc).epsilon(1e-5));
    CHECK(total_loss(out, y0, x0, 0.0, 0.0).total.item() == doctest::Approx(a.srt).epsilon(1e-6));
    CHECK(a.total.item() == doctest::Approx(a.srt + 0.7 * a.dc + 1.3 * a.rirm).epsilon(1e-5));
  }

  TEST_CASE("image-only variant uses the image term alone") {
    ForwardResult out;
    out.image = Tensor::full({1, 1, 3, 3}, 2);
    const LossTerms t = total_loss(out, Tensor(), Tensor({1, 1, 3, 3}), 1.0, 1.0);
    CHECK(t.total.item() == doctest::Approx(4.0));
    CHECK(t.srt == 0.0);
  }
}

TEST_SUITE("gradients") {
  TEST_CASE("every parameter gets a finite gradient at 64x64, 24 views") {
    const auto g = tomo::ScanGeometry::desk(64, 128, 24);
    auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    const auto item = phantom_item(g, 3);
    grad::Tape<Real> tape;
    grad::TapeScope<Real> scope(tape);
    const auto out = model_forward(item.y_noisy, model, item.x1);
    grad::backward(total_loss(out, item.y_clean, item.x_gt, 1.0, 1.0).total);
    for (const auto& p : model.parameters()) {
      CAPTURE(p.name);
      REQUIRE(p.tensor.has_grad());
      for (Real v : p.tensor.grad()) REQUIRE(std::isfinite(v));
    }
  }

  TEST_CASE("total loss matches finite differences on 20 parameters") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    testing::perturb(model, 8);
    const auto item = phantom_item(g, 4);
    auto loss = [&] {
      grad::NoGradScope<Real> off;
      return double(total_loss(model_forward(item.y_noisy, model, item.x1), item.y_clean, item.x_gt, 1.0, 1.0)
                        .total.item());
    };
    {
      grad::Tape<Real> tape;
      grad::TapeScope<Real> scope(tape);
      grad::backward(total_loss(model_forward(item.y_noisy, model, item.x1), item.y_clean, item.x_gt, 1.0, 1.0).total);
    }
    const auto params = model.parameters();
    std::size_t total = 0;
    for (const auto& p : params) total += p.tensor.numel();
    SplitMix64 rng(9);
    const Real h = 1e-2;
    double diff2 = 0.0, norm2 = 0.0;
    for (int k = 0; k < 20; ++k) {
      std::size_t flat = rng.below(total), which = 0;
      while (flat >= params[which].tensor.numel()) flat -= params[which].tensor.numel(), ++which;
      Tensor t = params[which].tensor;
      const Real saved = t.data()[flat];
      t.data()[flat] = saved + h;
      const double up = loss();
      t.data()[flat] = saved - h;
      const double down = loss();
      t.data()[flat] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = t.grad()[flat];
      diff2 += (numeric - analytic) * (numeric - analytic);
      norm2 += std::max(numeric * numeric, analytic * analytic);
    }
    CHECK(norm2 > 0.0);
    CHECK(std::sqrt(diff2 / norm2) < 5e-3);
  }

  TEST_CASE("image loss reaches the sinogram branch") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    testing::perturb(model, 10);
    const auto item = phantom_item(g, 5);
    grad::Tape<Real> tape;
    grad::TapeScope<Real> scope(tape);
    const auto out = model_forward(item.y_noisy, model, item.x1);
    grad::backward(grad::mse(out.image, item.x_gt));
    double srt_norm = 0.0;
    for (const auto& p : model.parameters()) {
      if (p.name.rfind("srt.", 0) == 0) srt_norm += grad_norm(p.tensor);
    }
    CHECK(srt_norm > 0.0);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bitwise, with and without optimizer state") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    auto model = DuDoTransModel::create(tiny_config(Method::dudotrans, g));
    testing::perturb(model, 11);
    train::AdamState adam;
    adam.lr = 3e-4;
    adam.reset(model.parameters());
    adam.t = 17;
    SplitMix64 rng(12);
    for (auto& m : adam.m) for (auto& v : m) v = static_cast<Real>(rng.uniform(-1, 1));
    for (auto& m : adam.v) for (auto& v : m) v = static_cast<Real>(rng.uniform(0, 1));

    const auto bytes = encode_checkpoint(model, &adam);
    const Checkpoint back = decode_checkpoint(bytes, "mem");
    CHECK(back.model.config() == model.config());
    const auto a = model.parameters(), b = back.model.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      CHECK(a[k].name == b[k].name);
      CHECK(bitwise_equal(a[k].tensor, b[k].tensor));
    }
    REQUIRE(back.adam.has_value());
    CHECK(back.adam->t == 17);
    CHECK(back.adam->lr == 3e-4);
    CHECK(back.adam->m == adam.m);
    CHECK(back.adam->v == adam.v);
    CHECK(encode_checkpoint(back.model, &*back.adam) == bytes);

    const Checkpoint plain = decode_checkpoint(encode_checkpoint(model, nullptr), "mem");
    CHECK(!plain.adam.has_value());

    train::AdamState fresh;
    const Checkpoint zeros = decode_checkpoint(encode_checkpoint(model, &fresh), "mem");
    REQUIRE(zeros.adam.has_value());
    for (const auto& m : zeros.adam->m) for (Real v : m) CHECK(v == 0);
  }

  TEST_CASE("corrupt files are rejected") {
    const auto g = tomo::ScanGeometry::desk(32, 64, 24);
    const auto model = DuDoTransModel::create(tiny_config(Method::imgtrans, g));
    const auto bytes = encode_checkpoint(model, nullptr);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic, "f.ddtc"), std::runtime_error);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 2);
    CHECK_THROWS_AS(decode_checkpoint(truncated, "f.ddtc"), std::runtime_error);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(trailing, "f.ddtc"), std::runtime_error);
    try {
      decode_checkpoint(bad_magic, "f.ddtc");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("f.ddtc") != std::string::npos);
    }
  }
}
