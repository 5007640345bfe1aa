#include "dudotrans/tomo/ctar.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "dudotrans/common/binary_io.hpp"

namespace dudotrans::tomo {

namespace {

constexpr char kMagic[4] = {'C', 'T', 'A', 'R'};
constexpr std::uint32_t kVersion = 1;

SinogramKind sinogram_kind(CtarKind kind) {
  switch (kind) {
    case CtarKind::fan_sinogram:
      return SinogramKind::fan;
    case CtarKind::parallel_sinogram:
      return SinogramKind::parallel;
    default:
      throw std::runtime_error("CTAR record holds an image, not a sinogram");
  }
}

}  // namespace

Array2D quantize_float32(const Array2D& array) {
  Array2D out = array;
  for (double& v : out.data) v = static_cast<double>(static_cast<float>(v));
  return out;
}

std::vector<std::uint8_t> encode_ctar(const CtarRecord& record) {
  if (record.array.data.size() != record.array.rows * record.array.cols) {
    throw std::invalid_argument("CTAR: array data does not match its shape");
  }
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u8(static_cast<std::uint8_t>(record.kind));
  w.u32(static_cast<std::uint32_t>(record.array.rows));
  w.u32(static_cast<std::uint32_t>(record.array.cols));
  for (double v : record.array.data) w.f32(static_cast<float>(v));
  const std::string geometry = nlohmann::json(record.geometry).dump();
  w.u32(static_cast<std::uint32_t>(geometry.size()));
  w.bytes(geometry.data(), geometry.size());
  return w.take();
}

CtarRecord decode_ctar(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "CTAR");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("CTAR: bad magic");
  if (const auto version = r.u32(); version != kVersion) {
    throw std::runtime_error("CTAR: unsupported version " + std::to_string(version));
  }
  CtarRecord out;
  const auto kind = r.u8();
  if (kind > 2) throw std::runtime_error("CTAR: unknown kind " + std::to_string(kind));
  out.kind = static_cast<CtarKind>(kind);
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  const std::uint64_t count = static_cast<std::uint64_t>(rows) * cols;
  if (count * 4 > r.remaining()) throw std::runtime_error("CTAR: truncated data");
  out.array = Array2D(rows, cols);
  for (double& v : out.array.data) v = r.f32();
  const std::uint32_t json_len = r.u32();
  std::string text(json_len, '\0');
  r.bytes(text.data(), json_len);
  try {
    out.geometry = nlohmann::json::parse(text).get<ScanGeometry>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("CTAR: bad geometry trailer: ") + e.what());
  }
  return out;
}

void write_ctar(const std::filesystem::path& path, const CtarRecord& record) {
  write_file_bytes(path, encode_ctar(record));
}

CtarRecord read_ctar(const std::filesystem::path& path) {
  try {
    return decode_ctar(read_file_bytes(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void save_image(const std::filesystem::path& path, const CtImage& image) {
  image.check_shape();
  write_ctar(path, {CtarKind::image, image.pixels, image.geometry});
}

CtImage load_image(const std::filesystem::path& path) {
  CtarRecord rec = read_ctar(path);
  if (rec.kind != CtarKind::image) throw std::runtime_error(path.string() + ": not an image file");
  CtImage image{std::move(rec.array), rec.geometry};
  image.check_shape();
  return image;
}

void save_sinogram(const std::filesystem::path& path, const Sinogram& sino) {
  sino.check_shape();
  const CtarKind kind = sino.kind == SinogramKind::fan ? CtarKind::fan_sinogram : CtarKind::parallel_sinogram;
  write_ctar(path, {kind, sino.bins, sino.geometry});
}

Sinogram load_sinogram(const std::filesystem::path& path) {
  CtarRecord rec = read_ctar(path);
  Sinogram sino{std::move(rec.array), sinogram_kind(rec.kind), rec.geometry};
  sino.check_shape();
  return sino;
}

}  // namespace dudotrans::tomo
