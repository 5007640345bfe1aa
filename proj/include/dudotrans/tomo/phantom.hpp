#pragma once

#include <cstdint>
#include <vector>

#include "dudotrans/tomo/arrays.hpp"

namespace dudotrans::tomo {

struct Ellipse {
  double center_x = 0.0;
  double center_y = 0.0;
  double semi_axis_a = 0.0;  // along the rotated x axis
  double semi_axis_b = 0.0;
  double rotation_rad = 0.0;
  double additive_value = 0.0;

  bool contains(double x, double y) const;
  /// Largest distance from the origin over the ellipse boundary.
  double max_radius() const;
};

struct PhantomSpec {
  std::vector<Ellipse> ellipses;

  /// Throws std::invalid_argument for an ellipse that leaves the unit disk or
  /// has a non-positive semi-axis.
  void validate() const;
  /// Unclipped sum of additive values at (x, y).
  double value_at(double x, double y) const;
};

/// The modified (high-contrast) Shepp-Logan table, values in [0, 1].
PhantomSpec shepp_logan();

/// Shepp-Logan with every ellipse parameter jittered by up to +/-10%: semi-axes
/// and values scale by U(0.9, 1.1), centers shift by U(-0.1, 0.1) times the
/// matching semi-axis, rotations shift by up to 10% of a quarter turn. The
/// result is shrunk about the origin if needed to stay inside radius 0.98.
PhantomSpec jittered_shepp_logan(std::uint64_t seed, std::uint64_t index);

/// pixel = clip(sum of containing ellipse values, 0, 1), averaged over a 2x2
/// grid of sub-pixel samples.
CtImage rasterize_phantom(const PhantomSpec& spec, const ScanGeometry& geometry);

}  // namespace dudotrans::tomo
