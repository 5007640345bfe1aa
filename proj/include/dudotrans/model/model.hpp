#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dudotrans/nn/swin.hpp"
#include "dudotrans/tomo/arrays.hpp"
#include "dudotrans/train/adam.hpp"

namespace dudotrans::model {

using nn::ParamList;
using nn::Tensor;

/// fbp: no learned parts. imgtrans: RIRM on the FBP image alone (one input
/// channel, no sinogram branch). dudotrans: SRT + consistency layer + RIRM.
enum class Method { fbp, imgtrans, dudotrans };

std::string to_string(Method m);
Method parse_method(const std::string& text);

/// Sinogram restoration transformer: m = depth residual blocks, each holding
/// n = width STMs, on tokens of patch size p.
struct SrtConfig {
  std::size_t depth = 3;
  std::size_t width = 1;
  std::size_t patch = 1;
  nn::StmConfig stm{};

  void validate() const;
  bool operator==(const SrtConfig&) const = default;
};

/// Image refinement: shallow patch-embedding conv, `depth` deep residual
/// blocks of `width` STMs, and a zero-initialized reconstruction conv.
struct RirmConfig {
  std::size_t depth = 2;
  std::size_t width = 4;
  std::size_t patch = 2;
  nn::StmConfig stm{};

  void validate() const;
  bool operator==(const RirmConfig&) const = default;
};

struct ModelConfig {
  Method method = Method::dudotrans;
  tomo::ScanGeometry geometry{};  // sparse-view geometry of the inputs
  SrtConfig srt{};
  RirmConfig rirm{};
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const SrtConfig& c);
void from_json(const nlohmann::json& j, SrtConfig& c);
void to_json(nlohmann::json& j, const RirmConfig& c);
void from_json(const nlohmann::json& j, RirmConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct SrtParams {
  nn::PatchEmbedParams embed;
  std::vector<nn::ResidualBlockParams> blocks;
  nn::ConvParams conv_mid;
  nn::PatchUnembedParams unembed;  // zero at init
};

struct RirmParams {
  nn::PatchEmbedParams shallow;
  std::vector<nn::ResidualBlockParams> deep;
  nn::PatchUnembedParams recon;  // zero at init
};

class DuDoTransModel {
 public:
  /// Builds and initializes parameters from config.seed. Every residual exit
  /// (block convs, SRT unembed, RIRM reconstruction) starts at zero.
  static DuDoTransModel create(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  /// Named parameters in a fixed order; the tensors are shared handles.
  ParamList parameters() const;
  const SrtParams& srt() const { return srt_; }
  const RirmParams& rirm() const { return rirm_; }

 private:
  ModelConfig config_;
  SrtParams srt_;
  RirmParams rirm_;
};

std::size_t count_parameters(const DuDoTransModel& model);

// Conversions between tomo arrays (double) and model tensors [1, 1, rows, cols].
Tensor to_tensor(const tomo::Array2D& a);
tomo::Array2D to_array(const Tensor& t);

/// Y [B, 1, views, detectors] -> restored sinogram, same shape.
Tensor srt_forward(const Tensor& y, const DuDoTransModel& model);

/// Differentiable FBP of y [B, 1, views, detectors] -> [B, 1, rows, cols].
/// Its backward rule applies fbp_adjoint.
Tensor dudo_consistency(const Tensor& y, const tomo::ScanGeometry& geometry);

/// x1, x2 [B, 1, rows, cols] -> x1 + refinement. For imgtrans x2 is ignored
/// and may be undefined.
Tensor rirm_forward(const Tensor& x1, const Tensor& x2, const DuDoTransModel& model);

struct ForwardResult {
  Tensor x1;          // fbp(Y_noisy), constant
  Tensor sino;        // restored sinogram (undefined for imgtrans)
  Tensor x2;          // consistency-layer image (undefined for imgtrans)
  Tensor image;       // final reconstruction
};

/// Full forward pass. `x1` may carry a precomputed fbp(y); otherwise it is
/// computed here.
ForwardResult model_forward(const Tensor& y_noisy, const DuDoTransModel& model, const Tensor& x1 = Tensor());

struct LossTerms {
  Tensor total;
  double srt = 0.0;
  double dc = 0.0;
  double rirm = 0.0;
};

/// L = mse(sino, y_gt) + lambda1 mse(x2, x_gt) + lambda2 mse(image, x_gt).
/// For imgtrans only the last term is present, with weight 1.
LossTerms total_loss(const ForwardResult& out, const Tensor& y_gt, const Tensor& x_gt, double lambda1,
                     double lambda2);

/// Loads a checkpoint and returns the model plus any optimizer state.
struct Checkpoint {
  DuDoTransModel model;
  std::optional<train::AdamState> adam;
};

/// DDTC layout: "DDTC", u32 version 1, u32 length + JSON config, u32 tensor
/// count, then per tensor u16 name length + name, u8 rank, u32 dims, float32
/// data. Adam moments follow as "adam.m.<name>" / "adam.v.<name>".
std::vector<std::uint8_t> encode_checkpoint(const DuDoTransModel& model, const train::AdamState* adam);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context);
void save_checkpoint(const std::filesystem::path& path, const DuDoTransModel& model, const train::AdamState* adam);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dudotrans::model
