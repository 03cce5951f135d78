#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "jointdyn/ops.hpp"
#include "jointdyn/tensor.hpp"

namespace jointdyn::netmodel {

using tensorgrad::Tape;
using tensorgrad::Tensor;

inline constexpr std::size_t kRewardClasses = 3;

/// Reward class index order is fixed as (-1, 0, +1).
inline constexpr int reward_value_of_class(std::size_t cls) { return static_cast<int>(cls) - 1; }

struct ConvLayerSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct NetworkConfig {
  std::size_t frame_height = 32;
  std::size_t frame_width = 32;
  std::size_t history = 4;
  std::size_t num_actions = 3;
  std::vector<ConvLayerSpec> encoder_convs;
  std::size_t latent_dim = 256;

  /// 32x32, Conv(16,6,s2) -> Conv(32,4,s2) -> Dense(256).
  static NetworkConfig desk(std::size_t num_actions);
  /// 16x16 config for gradient checks.
  static NetworkConfig test16(std::size_t num_actions);
  /// 84x84, Conv(64,8,s2) -> Conv(128,6,s2) -> Conv(128,6,s2) -> Conv(128,4,s2) -> Dense(2048).
  static NetworkConfig paper(std::size_t num_actions);

  /// Throws std::invalid_argument if the encoder collapses the frame or the
  /// mirrored decoder cannot reproduce one frame.
  void validate() const;

  bool operator==(const NetworkConfig&) const;
};

enum class ModelVariant { joint, decoupled_objective, decoupled_architecture };

std::string variant_name(ModelVariant v);  // joint | decoupled-obj | decoupled-arch
ModelVariant parse_variant(const std::string& name);

enum class Mode { train, eval };

struct ConvWeights {
  Tensor kernels;
  Tensor bias;
  tensorgrad::Conv2dGeometry geometry;
};

struct DenseWeights {
  Tensor weights;
  std::optional<Tensor> bias;
};

struct DecoderWeights {
  DenseWeights fc;
  std::size_t reshape_channels = 0, reshape_height = 0, reshape_width = 0;
  std::vector<ConvWeights> deconvs;  // the last one emits the single frame channel
};

/// One encoder + multiplicative transform stack with its heads.
struct Tower {
  std::vector<ConvWeights> encoder_convs;
  DenseWeights encoder_fc;
  DenseWeights encoding_factor;  // bias-free, multiplies with the action branch
  DenseWeights action_factor;    // bias-free
  DenseWeights transform_out;
  std::optional<DecoderWeights> decoder;
  std::optional<DenseWeights> reward_head;

  /// Every learnable tensor with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;
};

/// All learnable weights. The joint and decoupled-objective variants share
/// one tower carrying both heads; the decoupled architecture has a frame
/// tower without reward head and a separate reward tower without decoder.
struct JointModelParams {
  NetworkConfig config;
  ModelVariant variant = ModelVariant::joint;
  Tower primary;
  std::optional<Tower> reward_tower;
  std::uint64_t seed = 0;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  /// Parameters that only receive frame-loss gradients.
  std::vector<Tensor> frame_parameters() const;
};

struct LatentState {
  Tensor h_enc;
  Tensor h_dec;
};

struct StepOutput {
  Tensor frame;         // [1,H,W]
  Tensor reward_probs;  // [3]
};

/// Glorot-uniform weights except the two multiplicative layers: the action
/// side draws from U[-0.1,0.1], the encoding side from U[-1,1]. Biases are 0.
JointModelParams init_weights(const NetworkConfig& config, std::uint64_t seed,
                              ModelVariant variant = ModelVariant::joint);

Tensor encode(Tape* tape, const Tower& tower, const NetworkConfig& config, const Tensor& frames);

/// h_dec = W_out ((W_enc h_enc) * (W_act a)) + b_out. `action` must be a
/// one-hot vector or all zeros.
Tensor transform(Tape* tape, const Tower& tower, const Tensor& h_enc, const Tensor& action);

/// Predicted frame [1,H,W]; clipped to [-1,1] in eval mode.
Tensor decode_frame(Tape* tape, const Tower& tower, const Tensor& h_dec, Mode mode);

Tensor predict_reward(Tape* tape, const Tower& tower, const Tensor& h_dec);

StepOutput forward_step(Tape* tape, const JointModelParams& params, const Tensor& frames,
                        const Tensor& action, Mode mode);

struct RolloutOptions {
  Mode mode = Mode::eval;
  /// Train mode only: clip frames before feeding them back. Eval mode
  /// always feeds back the clipped prediction.
  bool clip_feedback_in_training = false;
};

/// Rolls the model forward one step per action, replacing the oldest history
/// frame with the prediction each time. `history` holds exactly
/// config.history frames of shape [1,H,W].
std::vector<StepOutput> rollout(Tape* tape, const JointModelParams& params, std::vector<Tensor> history,
                                const std::vector<Tensor>& actions, const RolloutOptions& options = {});

std::size_t count_parameters(const JointModelParams& params);
/// Parameter count implied by a config alone (equals count_parameters of an initialized model).
std::size_t count_parameters(const NetworkConfig& config, ModelVariant variant);

Tensor one_hot(std::size_t index, std::size_t width);
/// argmax of the reward distribution mapped to -1, 0 or +1.
int predicted_reward_value(const Tensor& reward_probs);

// Checkpoint container "JDYN1": magic | u32 format version | config text |
// u64 seed | u32 blob count | (name, u32 rank, u64 dims..., f64 values)... |
// u64 FNV-1a checksum. All integers and floats little-endian.
std::vector<std::uint8_t> serialize_checkpoint(const JointModelParams& params);
JointModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const JointModelParams& params);
JointModelParams load_checkpoint(const std::filesystem::path& path);

std::string config_text(const NetworkConfig& config, ModelVariant variant);

}  // namespace jointdyn::netmodel
