#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "dudotrans/metrics/metrics.hpp"
#include "dudotrans/model/model.hpp"
#include "dudotrans/sim/noise.hpp"
#include "dudotrans/train/train.hpp"

namespace dudotrans::cli {

inline constexpr int kSchemaVersion = 1;

/// Everything `train` and `ablate` need, one section per home module.
/// geometry and noise are optional: when present they are checked against
/// the dataset named by train.manifest.
struct RunConfig {
  int schema_version = kSchemaVersion;
  model::Method method = model::Method::dudotrans;
  std::optional<tomo::ScanGeometry> geometry;
  std::optional<sim::NoiseConfig> noise;
  model::SrtConfig srt{};
  model::RirmConfig rirm{};
  train::TrainConfig train{};
  metrics::MetricConfig metrics{};

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Parses and validates; a relative train.manifest is resolved against the
/// config file's directory. Throws std::invalid_argument on any problem.
RunConfig load_run_config(const std::filesystem::path& path);

/// Model configuration for `method` on the given sparse-view geometry.
model::ModelConfig model_config(const RunConfig& c, model::Method method, const tomo::ScanGeometry& geometry);

}  // namespace dudotrans::cli
