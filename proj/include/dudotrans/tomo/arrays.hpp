#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dudotrans/tomo/geometry.hpp"

namespace dudotrans::tomo {

/// Dense row-major 2-D array of doubles.
struct Array2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Array2D() = default;
  Array2D(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool all_finite() const;

  bool operator==(const Array2D&) const = default;
};

enum class SinogramKind : std::uint8_t { fan = 1, parallel = 2 };

/// Attenuation map X on the geometry's image grid.
struct CtImage {
  Array2D pixels;
  ScanGeometry geometry;

  /// Zero image shaped for `geometry`.
  static CtImage zeros(const ScanGeometry& geometry);
  /// Throws std::invalid_argument if the array shape disagrees with the geometry.
  void check_shape() const;
};

/// Line integrals Y. Fan kind: num_views x num_detectors. Parallel kind:
/// parallel_angles() x parallel_offsets() of its geometry.
struct Sinogram {
  Array2D bins;
  SinogramKind kind = SinogramKind::fan;
  ScanGeometry geometry;

  static Sinogram zeros(const ScanGeometry& geometry, SinogramKind kind);
  void check_shape() const;
};

}  // namespace dudotrans::tomo
