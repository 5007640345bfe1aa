#include "dudotrans/tomo/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dudotrans/common/rng.hpp"

namespace dudotrans::tomo {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kMaxJitteredRadius = 0.98;

}  // namespace

bool Ellipse::contains(double x, double y) const {
  const double c = std::cos(rotation_rad);
  const double s = std::sin(rotation_rad);
  const double dx = x - center_x;
  const double dy = y - center_y;
  const double u = (dx * c + dy * s) / semi_axis_a;
  const double v = (-dx * s + dy * c) / semi_axis_b;
  return u * u + v * v <= 1.0;
}

double Ellipse::max_radius() const {
  const double c = std::cos(rotation_rad);
  const double s = std::sin(rotation_rad);
  double best = 0.0;
  constexpr int kSamples = 2048;
  for (int i = 0; i < kSamples; ++i) {
    const double t = 2.0 * std::numbers::pi * i / kSamples;
    const double u = semi_axis_a * std::cos(t);
    const double v = semi_axis_b * std::sin(t);
    best = std::max(best, std::hypot(center_x + u * c - v * s, center_y + u * s + v * c));
  }
  return best;
}

void PhantomSpec::validate() const {
  for (std::size_t i = 0; i < ellipses.size(); ++i) {
    const Ellipse& e = ellipses[i];
    if (!(e.semi_axis_a > 0.0) || !(e.semi_axis_b > 0.0)) {
      throw std::invalid_argument("ellipse " + std::to_string(i) + " has a non-positive semi-axis");
    }
    if (!std::isfinite(e.center_x) || !std::isfinite(e.center_y) || !std::isfinite(e.rotation_rad) ||
        !std::isfinite(e.additive_value)) {
      throw std::invalid_argument("ellipse " + std::to_string(i) + " has a non-finite parameter");
    }
    if (e.max_radius() > 1.0 + 1e-9) {
      throw std::invalid_argument("ellipse " + std::to_string(i) + " extends outside the unit disk");
    }
  }
}

double PhantomSpec::value_at(double x, double y) const {
  double v = 0.0;
  for (const Ellipse& e : ellipses) {
    if (e.contains(x, y)) v += e.additive_value;
  }
  return v;
}

PhantomSpec shepp_logan() {
  // center_x, center_y, a, b, rotation, value
  return PhantomSpec{{
      {0.0, 0.0, 0.69, 0.92, 0.0, 1.0},
      {0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8},
      {0.22, 0.0, 0.11, 0.31, -18.0 * kDeg, -0.2},
      {-0.22, 0.0, 0.16, 0.41, 18.0 * kDeg, -0.2},
      {0.0, 0.35, 0.21, 0.25, 0.0, 0.1},
      {0.0, 0.1, 0.046, 0.046, 0.0, 0.1},
      {0.0, -0.1, 0.046, 0.046, 0.0, 0.1},
      {-0.08, -0.605, 0.046, 0.023, 0.0, 0.1},
      {0.0, -0.606, 0.023, 0.023, 0.0, 0.1},
      {0.06, -0.605, 0.023, 0.046, 0.0, 0.1},
  }};
}

PhantomSpec jittered_shepp_logan(std::uint64_t seed, std::uint64_t index) {
  PhantomSpec spec = shepp_logan();
  SplitMix64 rng = make_stream(seed, {0x5048414eULL /* "PHAN" */, index});
  for (Ellipse& e : spec.ellipses) {
    const double a = e.semi_axis_a;
    const double b = e.semi_axis_b;
    e.center_x += rng.uniform(-0.1, 0.1) * a;
    e.center_y += rng.uniform(-0.1, 0.1) * b;
    e.semi_axis_a *= rng.uniform(0.9, 1.1);
    e.semi_axis_b *= rng.uniform(0.9, 1.1);
    e.rotation_rad += rng.uniform(-0.1, 0.1) * 0.5 * std::numbers::pi;
    e.additive_value *= rng.uniform(0.9, 1.1);
  }
  double reach = 0.0;
  for (const Ellipse& e : spec.ellipses) reach = std::max(reach, e.max_radius());
  if (reach > kMaxJitteredRadius) {
    const double shrink = kMaxJitteredRadius / reach;
    for (Ellipse& e : spec.ellipses) {
      e.center_x *= shrink;
      e.center_y *= shrink;
      e.semi_axis_a *= shrink;
      e.semi_axis_b *= shrink;
    }
  }
  return spec;
}

CtImage rasterize_phantom(const PhantomSpec& spec, const ScanGeometry& geometry) {
  geometry.validate();
  spec.validate();
  CtImage out = CtImage::zeros(geometry);
  const double q = 0.25 * geometry.pixel_spacing;
  const double offsets[2] = {-q, q};
  for (std::size_t r = 0; r < geometry.image_rows; ++r) {
    const double y = geometry.pixel_y(r);
    for (std::size_t c = 0; c < geometry.image_cols; ++c) {
      const double x = geometry.pixel_x(c);
      double acc = 0.0;
      for (double oy : offsets) {
        for (double ox : offsets) acc += std::clamp(spec.value_at(x + ox, y + oy), 0.0, 1.0);
      }
      out.pixels(r, c) = 0.25 * acc;
    }
  }
  return out;
}

}  // namespace dudotrans::tomo
