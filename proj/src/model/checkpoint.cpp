#include <cstring>
#include <limits>
#include <map>
#include <stdexcept>

#include "dudotrans/common/binary_io.hpp"
#include "dudotrans/model/model.hpp"

namespace dudotrans::model {

namespace {

constexpr char kMagic[4] = {'D', 'D', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;
const std::string kAdamM = "adam.m.";
const std::string kAdamV = "adam.v.";

struct Record {
  grad::Shape shape;
  std::vector<float> data;
};

void write_record(ByteWriter& w, const std::string& name, const grad::Shape& shape, std::span<const Real> values) {
  if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw std::invalid_argument("tensor name too long");
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (Real v : values) w.f32(static_cast<float>(v));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const DuDoTransModel& model, const train::AdamState* adam) {
  const ParamList params = model.parameters();
  nlohmann::json config = model.config();
  nlohmann::json doc{{"model", config}};
  // A fresh optimizer has no moments yet; they are written as zeros.
  train::AdamState fresh;
  if (adam && adam->m.empty() && adam->v.empty() && adam->t == 0) {
    fresh = *adam;
    fresh.reset(params);
    adam = &fresh;
  }
  if (adam) {
    if (adam->m.size() != params.size() || adam->v.size() != params.size()) {
      throw std::invalid_argument("encode_checkpoint: optimizer state does not match the model parameters");
    }
    doc["adam"] = *adam;
  }
  const std::string text = doc.dump();

  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.u32(static_cast<std::uint32_t>(params.size() * (adam ? 3 : 1)));
  for (const auto& p : params) write_record(w, p.name, p.tensor.shape(), p.tensor.data());
  if (adam) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      write_record(w, kAdamM + params[k].name, params[k].tensor.shape(), adam->m[k]);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      write_record(w, kAdamV + params[k].name, params[k].tensor.shape(), adam->v[k]);
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  ByteReader r(bytes, context);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error(context + ": not a DDTC checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw std::runtime_error(context + ": unsupported checkpoint version " + std::to_string(version));
  std::string text(r.u32(), '\0');
  r.bytes(text.data(), text.size());

  nlohmann::json doc;
  ModelConfig config;
  std::optional<train::AdamState> adam;
  try {
    doc = nlohmann::json::parse(text);
    config = doc.at("model").get<ModelConfig>();
    if (doc.contains("adam")) adam = doc.at("adam").get<train::AdamState>();
  } catch (const std::exception& e) {
    throw std::runtime_error(context + ": bad checkpoint config: " + e.what());
  }

  std::map<std::string, Record> records;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.u16(), '\0');
    r.bytes(name.data(), name.size());
    Record rec;
    rec.shape.resize(r.u8());
    for (auto& d : rec.shape) d = r.u32();
    const std::size_t n = grad::numel(rec.shape);
    if (n * 4 > r.remaining()) throw std::runtime_error(context + ": unexpected end of data in tensor " + name);
    rec.data.resize(n);
    for (auto& v : rec.data) v = r.f32();
    if (!records.emplace(name, std::move(rec)).second) throw std::runtime_error(context + ": duplicate tensor " + name);
  }
  if (r.remaining() != 0) throw std::runtime_error(context + ": trailing bytes after tensor records");

  Checkpoint out{DuDoTransModel::create(config), std::nullopt};
  const ParamList params = out.model.parameters();
  auto take = [&](const std::string& name, const grad::Shape& shape, std::span<Real> dst) {
    auto it = records.find(name);
    if (it == records.end()) throw std::runtime_error(context + ": missing tensor " + name);
    if (it->second.shape != shape) {
      throw std::runtime_error(context + ": tensor " + name + " has shape " + grad::shape_str(it->second.shape) +
                               ", expected " + grad::shape_str(shape));
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(it->second.data[i]);
    records.erase(it);
  };
  for (const auto& p : params) {
    Tensor t = p.tensor;
    take(p.name, t.shape(), t.data());
  }
  if (adam) {
    adam->m.assign(params.size(), {});
    adam->v.assign(params.size(), {});
    for (std::size_t k = 0; k < params.size(); ++k) {
      adam->m[k].resize(params[k].tensor.numel());
      adam->v[k].resize(params[k].tensor.numel());
      take(kAdamM + params[k].name, params[k].tensor.shape(), adam->m[k]);
      take(kAdamV + params[k].name, params[k].tensor.shape(), adam->v[k]);
    }
  }
  if (!records.empty()) throw std::runtime_error(context + ": unexpected tensor " + records.begin()->first);
  out.adam = std::move(adam);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const DuDoTransModel& model, const train::AdamState* adam) {
  write_file_bytes(path, encode_checkpoint(model, adam));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

}  // namespace dudotrans::model
