#include "dudotrans/tomo/arrays.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dudotrans::tomo {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + ", " + std::to_string(c) + ")";
}

}  // namespace

bool Array2D::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

CtImage CtImage::zeros(const ScanGeometry& geometry) {
  return {Array2D(geometry.image_rows, geometry.image_cols), geometry};
}

void CtImage::check_shape() const {
  if (pixels.rows != geometry.image_rows || pixels.cols != geometry.image_cols ||
      pixels.data.size() != pixels.rows * pixels.cols) {
    throw std::invalid_argument("image shape " + shape_str(pixels.rows, pixels.cols) +
                                " does not match geometry image_size " +
                                shape_str(geometry.image_rows, geometry.image_cols));
  }
}

Sinogram Sinogram::zeros(const ScanGeometry& geometry, SinogramKind kind) {
  if (kind == SinogramKind::fan) {
    return {Array2D(geometry.num_views, geometry.num_detectors), kind, geometry};
  }
  return {Array2D(geometry.parallel_angles(), geometry.parallel_offsets()), kind, geometry};
}

void Sinogram::check_shape() const {
  const bool fan = kind == SinogramKind::fan;
  const std::size_t r = fan ? geometry.num_views : geometry.parallel_angles();
  const std::size_t c = fan ? geometry.num_detectors : geometry.parallel_offsets();
  if (bins.rows != r || bins.cols != c || bins.data.size() != r * c) {
    throw std::invalid_argument(std::string(fan ? "fan" : "parallel") + " sinogram shape " +
                                shape_str(bins.rows, bins.cols) + " does not match geometry " +
                                shape_str(r, c));
  }
}

}  // namespace dudotrans::tomo
