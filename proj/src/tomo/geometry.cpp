#include "dudotrans/tomo/geometry.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dudotrans/common/json_util.hpp"

namespace dudotrans::tomo {

ScanGeometry ScanGeometry::desk(std::size_t image_size, std::size_t detectors, std::size_t views) {
  ScanGeometry g;
  g.num_views = views;
  g.num_detectors = detectors;
  g.image_rows = image_size;
  g.image_cols = image_size;
  g.pixel_spacing = 2.0 / static_cast<double>(image_size);
  return g;
}

void ScanGeometry::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ScanGeometry: " + what); };
  if (num_views == 0) fail("num_views must be positive");
  if (num_detectors == 0) fail("num_detectors must be positive");
  if (image_rows == 0 || image_cols == 0) fail("image_size must be positive");
  if (!(pixel_spacing > 0.0) || !std::isfinite(pixel_spacing)) fail("pixel_spacing must be positive");
  if (!(source_to_iso > 1.0)) fail("source_to_iso must exceed the field-of-view radius 1.0");
  if (!(source_to_detector > source_to_iso)) fail("source_to_detector must exceed source_to_iso");
  const double arc = fan_half_angle();
  if (!(arc > 0.0) || arc >= std::numbers::pi / 2) fail("detector_arc must lie in (0, pi/2)");
  // Small slack so the default asin(1/D) passes despite rounding.
  if (std::sin(arc) * source_to_iso < 1.0 - 1e-12) fail("fan does not cover the unit field of view");
}

double ScanGeometry::fan_half_angle() const {
  return detector_arc > 0.0 ? detector_arc : std::asin(1.0 / source_to_iso);
}

double ScanGeometry::view_spacing() const {
  return 2.0 * std::numbers::pi / static_cast<double>(num_views);
}

double ScanGeometry::view_angle(std::size_t k) const {
  return view_spacing() * static_cast<double>(k);
}

std::vector<double> ScanGeometry::view_angles() const {
  std::vector<double> out(num_views);
  for (std::size_t k = 0; k < num_views; ++k) out[k] = view_angle(k);
  return out;
}

double ScanGeometry::detector_spacing() const {
  return 2.0 * fan_half_angle() / static_cast<double>(num_detectors);
}

double ScanGeometry::detector_angle(std::size_t d) const {
  return -fan_half_angle() + (static_cast<double>(d) + 0.5) * detector_spacing();
}

double ScanGeometry::parallel_angle(std::size_t a) const {
  return std::numbers::pi * static_cast<double>(a) / static_cast<double>(num_views);
}

double ScanGeometry::offset_spacing() const {
  return 2.0 / static_cast<double>(num_detectors);
}

double ScanGeometry::offset(std::size_t j) const {
  return -1.0 + (static_cast<double>(j) + 0.5) * offset_spacing();
}

double ScanGeometry::pixel_x(std::size_t col) const {
  return (static_cast<double>(col) + 0.5 - 0.5 * static_cast<double>(image_cols)) * pixel_spacing;
}

double ScanGeometry::pixel_y(std::size_t row) const {
  return (0.5 * static_cast<double>(image_rows) - static_cast<double>(row) - 0.5) * pixel_spacing;
}

void to_json(nlohmann::json& j, const ScanGeometry& g) {
  j = nlohmann::json{{"num_views", g.num_views},
                     {"num_detectors", g.num_detectors},
                     {"source_to_iso", g.source_to_iso},
                     {"source_to_detector", g.source_to_detector},
                     {"detector_arc", g.detector_arc},
                     {"image_size", {g.image_rows, g.image_cols}},
                     {"pixel_spacing", g.pixel_spacing}};
}

void from_json(const nlohmann::json& j, ScanGeometry& g) {
  check_keys(j, {"num_views", "num_detectors", "source_to_iso", "source_to_detector", "detector_arc", "image_size",
                "pixel_spacing"},
             "geometry");
  ScanGeometry out;
  out.num_views = j.value("num_views", out.num_views);
  out.num_detectors = j.value("num_detectors", out.num_detectors);
  out.source_to_iso = j.value("source_to_iso", out.source_to_iso);
  out.source_to_detector = j.value("source_to_detector", out.source_to_detector);
  out.detector_arc = j.value("detector_arc", 0.0);
  if (j.contains("image_size")) {
    const auto& size = j.at("image_size");
    if (size.is_array()) {
      out.image_rows = size.at(0).get<std::size_t>();
      out.image_cols = size.at(1).get<std::size_t>();
    } else {
      out.image_rows = out.image_cols = size.get<std::size_t>();
    }
    out.pixel_spacing = 2.0 / static_cast<double>(std::max(out.image_rows, out.image_cols));
  }
  out.pixel_spacing = j.value("pixel_spacing", out.pixel_spacing);
  g = out;
}

}  // namespace dudotrans::tomo
