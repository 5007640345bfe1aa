#include "cli/run_config.hpp"

#include <fstream>

#include "dudotrans/common/json_util.hpp"

namespace dudotrans::cli {

void RunConfig::validate() const {
  if (schema_version != kSchemaVersion) {
    throw std::invalid_argument("run config: unsupported schema_version " + std::to_string(schema_version));
  }
  if (geometry) geometry->validate();
  if (noise) noise->validate();
  srt.validate();
  rirm.validate();
  train.validate();
  metrics.validate();
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"schema_version", c.schema_version}, {"method", model::to_string(c.method)},
                     {"srt", c.srt}, {"rirm", c.rirm}, {"train", c.train}, {"metrics", c.metrics}};
  if (c.geometry) j["geometry"] = *c.geometry;
  if (c.noise) j["noise"] = *c.noise;
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  check_keys(j, {"schema_version", "method", "geometry", "noise", "srt", "rirm", "train", "metrics"}, "run config");
  if (!j.contains("schema_version")) throw std::invalid_argument("run config: missing schema_version");
  RunConfig out;
  out.schema_version = j.at("schema_version").get<int>();
  if (j.contains("method")) out.method = model::parse_method(j.at("method").get<std::string>());
  if (j.contains("geometry")) out.geometry = j.at("geometry").get<tomo::ScanGeometry>();
  if (j.contains("noise")) out.noise = j.at("noise").get<sim::NoiseConfig>();
  if (j.contains("srt")) out.srt = j.at("srt").get<model::SrtConfig>();
  if (j.contains("rirm")) out.rirm = j.at("rirm").get<model::RirmConfig>();
  if (j.contains("train")) out.train = j.at("train").get<train::TrainConfig>();
  if (j.contains("metrics")) out.metrics = j.at("metrics").get<metrics::MetricConfig>();
  out.validate();
  c = out;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  RunConfig c;
  try {
    c = nlohmann::json::parse(in).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  if (c.train.manifest.empty()) throw std::invalid_argument(path.string() + ": train.manifest is required");
  std::filesystem::path manifest = c.train.manifest;
  if (manifest.is_relative()) manifest = path.parent_path() / manifest;
  c.train.manifest = manifest.lexically_normal().string();
  return c;
}

model::ModelConfig model_config(const RunConfig& c, model::Method method, const tomo::ScanGeometry& geometry) {
  model::ModelConfig m;
  m.method = method;
  m.geometry = geometry;
  m.srt = c.srt;
  m.rirm = c.rirm;
  m.lambda1 = c.train.lambda1;
  m.lambda2 = c.train.lambda2;
  m.seed = c.train.seed;
  m.validate();
  return m;
}

}  // namespace dudotrans::cli
