#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dudotrans/tomo/arrays.hpp"

namespace dudotrans::tomo {

// CTAR array file:
//   "CTAR" | u32 version = 1 | u8 kind (0 image, 1 fan, 2 parallel)
//   | u32 rows | u32 cols | rows*cols float32 LE row-major
//   | u32 json_length | UTF-8 JSON geometry
// All integers little-endian.

enum class CtarKind : std::uint8_t { image = 0, fan_sinogram = 1, parallel_sinogram = 2 };

struct CtarRecord {
  CtarKind kind = CtarKind::image;
  Array2D array;
  ScanGeometry geometry;
};

std::vector<std::uint8_t> encode_ctar(const CtarRecord& record);
/// Throws std::runtime_error on a malformed buffer.
CtarRecord decode_ctar(const std::vector<std::uint8_t>& bytes);

/// I/O failures throw std::runtime_error naming the path.
void write_ctar(const std::filesystem::path& path, const CtarRecord& record);
CtarRecord read_ctar(const std::filesystem::path& path);

void save_image(const std::filesystem::path& path, const CtImage& image);
CtImage load_image(const std::filesystem::path& path);
void save_sinogram(const std::filesystem::path& path, const Sinogram& sino);
Sinogram load_sinogram(const std::filesystem::path& path);

/// Round every entry to the nearest float32, i.e. what a CTAR round trip keeps.
Array2D quantize_float32(const Array2D& array);

}  // namespace dudotrans::tomo
