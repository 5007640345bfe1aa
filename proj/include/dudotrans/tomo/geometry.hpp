#pragma once

#include <cstddef>
#include <vector>

#include "json.hpp"

namespace dudotrans::tomo {

/// Fan-beam acquisition plus the reconstruction grid.
///
/// Lengths are dimensionless: the field of view is the unit disk. Views are
/// uniformly spaced over a full turn, angle[k] = 2*pi*k / num_views. Detectors
/// are equiangular over [-detector_arc, detector_arc].
///
/// After rebinning, the parallel grid has num_views angles over [0, pi) and
/// num_detectors offsets over [-1, 1].
struct ScanGeometry {
  std::size_t num_views = 96;
  std::size_t num_detectors = 256;
  double source_to_iso = 3.0;
  double source_to_detector = 5.0;
  double detector_arc = 0.0;  // fan half-angle; 0 selects asin(1 / source_to_iso)
  std::size_t image_rows = 128;
  std::size_t image_cols = 128;
  double pixel_spacing = 2.0 / 128.0;

  /// Desk defaults for a square image of `image_size` pixels spanning [-1, 1].
  static ScanGeometry desk(std::size_t image_size = 128, std::size_t detectors = 256,
                           std::size_t views = 96);

  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;

  double fan_half_angle() const;
  double view_angle(std::size_t k) const;
  std::vector<double> view_angles() const;
  double view_spacing() const;

  double detector_spacing() const;
  double detector_angle(std::size_t d) const;

  std::size_t parallel_angles() const { return num_views; }
  std::size_t parallel_offsets() const { return num_detectors; }
  double parallel_angle(std::size_t a) const;
  double offset_spacing() const;
  double offset(std::size_t j) const;

  /// Pixel-center coordinates; row 0 is the top (largest y).
  double pixel_x(std::size_t col) const;
  double pixel_y(std::size_t row) const;

  bool operator==(const ScanGeometry&) const = default;
};

void to_json(nlohmann::json& j, const ScanGeometry& g);
void from_json(const nlohmann::json& j, ScanGeometry& g);

}  // namespace dudotrans::tomo
