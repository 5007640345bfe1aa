#pragma once

#include <filesystem>

#include "dudotrans/tomo/arrays.hpp"

namespace dudotrans::cli {

/// Display mapping for normalized attenuation v: HU = kHuPerUnit * v + kHuAtZero,
/// so v = 0 is air and v = 1 is +1000 HU.
inline constexpr double kHuAtZero = -1000.0;
inline constexpr double kHuPerUnit = 2000.0;
inline constexpr double kWindowLowHu = -1000.0;
inline constexpr double kWindowHighHu = 800.0;

/// Gray level in [0, 255] for attenuation v under the [-1000, 800] HU window.
unsigned char window_gray(double v);

/// 8-bit grayscale PNG of `image` under the display window.
void write_png(const std::filesystem::path& path, const tomo::Array2D& image);

}  // namespace dudotrans::cli
