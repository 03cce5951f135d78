#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "jointdyn/datapipe.hpp"
#include "jointdyn/io.hpp"
#include "jointdyn/netmodel.hpp"
#include "jointdyn/optim.hpp"

namespace jointdyn::training {

using datapipe::Segment;
using netmodel::JointModelParams;
using tensorgrad::Tensor;

struct CurriculumPhase {
  std::uint64_t start_iteration = 0;
  std::size_t lookahead_K = 1;
  std::size_t minibatch_I = 32;
  double learning_rate = 1e-4;
};

struct CurriculumSchedule {
  std::vector<CurriculumPhase> phases;

  /// K 1 -> 3 -> 5 every 500k iterations; I 32 -> 8 and lr 1e-4 -> 1e-5 at the first switch.
  static CurriculumSchedule paper();
  /// K 1 -> 3 -> 5 at 0 / 4000 / 8000; I 16 -> 8; lr 1e-4 -> 1e-5.
  static CurriculumSchedule desk();
  static CurriculumSchedule constant(std::size_t K, std::size_t I, double lr);

  void validate() const;
  std::string to_text() const;  // "start:K:I:lr,..."
  static CurriculumSchedule from_text(const std::string& text);
};

/// Phase in effect at `iteration`: the last one whose start is <= iteration.
const CurriculumPhase& curriculum_lookup(const CurriculumSchedule& schedule, std::uint64_t iteration);

struct TrainConfig {
  double lambda_reward = 1.0;
  std::size_t unroll_T = 4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_epsilon = 1e-8;
  double grad_clip_threshold = 1.0;
  double taylor_threshold = std::exp(-10.0);
  CurriculumSchedule curriculum = CurriculumSchedule::desk();
  std::uint64_t total_iterations = 12000;
  std::uint64_t seed = 0;
  bool clip_feedback_in_training = false;

  void validate() const;
  /// Consumes one `key = value`; returns false for keys it does not own.
  bool apply(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  /// Every key must be a TrainConfig field.
  static TrainConfig from_key_values(const io::KeyValues& kv);
};

struct LossBreakdown {
  double total = 0.0;
  double frame_loss = 0.0;   // 1/(2ITK) * sum of squared frame errors
  double reward_loss = 0.0;  // 1/(2ITK) * sum of cross-entropies (before lambda)
  /// Per look-ahead step k (index k-1): averages over the I*T unrolls,
  /// without the 1/2 or 1/K factors.
  std::vector<double> frame_per_step;
  std::vector<double> reward_per_step;
};

struct LossOptions {
  double lambda_reward = 1.0;
  double taylor_threshold = std::exp(-10.0);
  netmodel::RolloutOptions rollout{netmodel::Mode::train, false};
};

struct LossGraph {
  Tensor total;  // scalar, differentiable when a tape was given
  LossBreakdown breakdown;
};

/// Cross-entropy with the Taylor-continued log below the threshold.
double cross_entropy_stable(const Tensor& reward_onehot, const Tensor& probs, double taylor_threshold);

/// L_K = 1/(2ITK) sum_i sum_t sum_k (||s - s_hat||^2 + lambda * CE(r, p)),
/// predictions fed back through the rollout. All segments must share T and K.
LossGraph compound_loss(tensorgrad::Tape* tape, const JointModelParams& model, const std::vector<Segment>& batch,
                        const LossOptions& options);

/// Allocates gradient buffers on every parameter.
void enable_gradients(JointModelParams& model);

struct StepSettings {
  double learning_rate = 1e-4;
  double grad_clip_threshold = 1.0;
  LossOptions loss;
  std::uint64_t iteration = 0;  // for diagnostics
};

/// One BPTT + global-norm clip + Adam update. Throws NumericError on a
/// non-finite loss.
LossBreakdown train_step(JointModelParams& model, const std::vector<Segment>& batch, const StepSettings& settings,
                         tensorgrad::AdamState& adam);

/// Gradients of the compound loss for every parameter, in parameters() order.
std::vector<std::vector<double>> loss_gradients(JointModelParams& model, const std::vector<Segment>& batch,
                                                const LossOptions& options);

struct LossLogRow {
  std::uint64_t iteration = 0;
  double total = 0.0, frame = 0.0, reward = 0.0;
  std::size_t K = 0, I = 0;
  double lr = 0.0;
};

std::string loss_log_csv(const std::vector<LossLogRow>& rows);

struct TrainResult {
  JointModelParams model;
  std::vector<LossLogRow> log;
  std::vector<std::filesystem::path> checkpoints;
};

struct TrainLoopOptions {
  /// When set, checkpoints go here at every phase boundary and at the end.
  std::filesystem::path checkpoint_dir;
  /// Called after every iteration; return false to stop early.
  std::function<bool(const LossLogRow&)> on_iteration;
};

/// Trains a freshly initialized model (seeded by config.seed) on segments
/// sampled uniformly from `dataset`.
TrainResult train_loop(const datapipe::Dataset& dataset, const netmodel::NetworkConfig& net,
                       netmodel::ModelVariant variant, const TrainConfig& config, const TrainLoopOptions& options = {});

/// Continues training `model` in place.
TrainResult train_loop(const datapipe::Dataset& dataset, JointModelParams model, const TrainConfig& config,
                       const TrainLoopOptions& options = {});

}  // namespace jointdyn::training
