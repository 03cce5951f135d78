#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "jointdyn/datapipe.hpp"
#include "jointdyn/netmodel.hpp"
#include "jointdyn/training.hpp"

namespace jointdyn::evalharness {

using datapipe::Dataset;
using datapipe::Trajectory;

struct RolloutEvalConfig {
  std::size_t num_eval_trajectories = 200;
  std::size_t max_lookahead = 30;
  std::uint64_t seed = 0;
  /// Baseline draws its ground truth from the model's samples (paired) or
  /// from an independent draw (pooled).
  bool paired_baseline = true;

  void validate() const;
};

/// Start of one evaluated rollout: frames t0-h+1..t0 are the history.
struct EvalSample {
  std::size_t trajectory = 0;
  std::size_t t0 = 0;
};

/// errors[k][j]: ground-truth minus predicted cumulative reward after k
/// look-ahead steps for sample j. errors[0] is all zeros.
struct CumRewardErrorDist {
  std::vector<std::vector<int>> errors;

  std::size_t max_lookahead() const { return errors.empty() ? 0 : errors.size() - 1; }
  double zero_error_fraction(std::size_t k) const;
};

struct PercentileBand {
  std::vector<double> median, p5, p95;
};

/// Sign of prediction minus truth per pixel: +1 where something is present
/// by mistake, -1 where something is absent by mistake.
struct ErrorMap {
  std::size_t height = 0, width = 0;
  std::vector<double> squared;
  std::vector<int> sign;
};

/// Source of per-step scalar reward predictions for a rollout that starts
/// at sample.t0 and follows the trajectory's recorded actions.
class RewardPredictor {
 public:
  virtual ~RewardPredictor() = default;
  virtual std::vector<int> predict_rewards(const Trajectory& trajectory, const EvalSample& sample,
                                           std::size_t steps) const = 0;
};

/// Eval-mode rollout of a trained network; reward = argmax class.
class ModelRewardPredictor : public RewardPredictor {
 public:
  explicit ModelRewardPredictor(const netmodel::JointModelParams& model) : model_(model) {}
  std::vector<int> predict_rewards(const Trajectory& trajectory, const EvalSample& sample,
                                   std::size_t steps) const override;

 private:
  const netmodel::JointModelParams& model_;
};

std::vector<EvalSample> draw_eval_samples(const Dataset& test, std::size_t history, std::size_t max_lookahead,
                                          std::size_t count, std::uint64_t seed);

/// Ground-truth cumulative rewards for k = 0..steps.
std::vector<int> true_cumulative(const Trajectory& trajectory, std::size_t t0, std::size_t steps);

CumRewardErrorDist eval_cumulative_reward(const RewardPredictor& predictor, const Dataset& test,
                                          const RolloutEvalConfig& config, std::size_t history);

/// Predicted rewards drawn i.i.d. from the test manifest's marginal.
CumRewardErrorDist marginal_baseline(const Dataset& test, const RolloutEvalConfig& config, std::size_t history);

/// Per-sample predicted cumulative reward of the marginal baseline, used by
/// the Monte-Carlo check: element [k][j].
std::vector<std::vector<int>> sample_marginal_cumulative(const std::array<double, 3>& marginal, std::size_t steps,
                                                         std::size_t samples, std::uint64_t seed);

/// Linear-interpolation estimator on sorted data at quantile q in [0,1].
double percentile(std::vector<double> samples, double q);
PercentileBand percentiles(const CumRewardErrorDist& dist);

struct StepStats {
  double mean = 0, median = 0, p5 = 0, p95 = 0, min = 0, max = 0;
};
StepStats summarize(const std::vector<double>& values);

struct TestLossCurve {
  /// [batch][k-1] per-step averages over the batch (no 1/2, no 1/K).
  std::vector<std::vector<double>> compound, frame, reward;
  std::vector<StepStats> compound_stats, frame_stats, reward_stats;
};

struct TestLossConfig {
  std::size_t lookahead_K = 30;
  std::size_t minibatch_I = 50;
  std::size_t num_batches = 50;
  std::size_t unroll_T = 1;
  double lambda_reward = 1.0;
  double taylor_threshold = std::exp(-10.0);
  std::uint64_t seed = 0;
};

/// Loss per look-ahead step, eval mode, without averaging over steps.
TestLossCurve test_loss_curve(const netmodel::JointModelParams& model, const Dataset& test,
                              const TestLossConfig& config);

ErrorMap error_map(const tensorgrad::Tensor& truth, const tensorgrad::Tensor& predicted);
/// 8-bit binary PGM. Magnitude scaling: round(255 * min(sq, 4) / 4), since
/// frames live in [-1,1]. The sign image maps -1/0/+1 to 0/128/255.
void write_error_map_pgm(const std::filesystem::path& magnitude_path, const std::filesystem::path& sign_path,
                         const ErrorMap& map);

/// Writes band.csv, hist_step<j>.csv (every 5th step), band.svg.
void write_band_report(const std::filesystem::path& dir, const CumRewardErrorDist& model,
                       const CumRewardErrorDist& baseline);
std::string band_svg(const PercentileBand& model, const PercentileBand& baseline, const std::string& title);

struct VariantRun {
  std::string game;
  netmodel::ModelVariant variant = netmodel::ModelVariant::joint;
  std::uint64_t seed = 0;
  std::size_t parameter_count = 0;
  CumRewardErrorDist dist;
  PercentileBand band;
};

struct ComparisonReport {
  std::vector<VariantRun> runs;
  CumRewardErrorDist baseline;

  /// Mean over seeds of the zero-error fraction at step k.
  double mean_zero_error_fraction(netmodel::ModelVariant variant, std::size_t k) const;
  std::string summary_csv(std::size_t k) const;
};

struct CompareOptions {
  std::vector<netmodel::ModelVariant> variants{netmodel::ModelVariant::joint,
                                               netmodel::ModelVariant::decoupled_objective,
                                               netmodel::ModelVariant::decoupled_architecture};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string game = "crossing";
  std::filesystem::path report_dir;  // report/<game>/<variant>/seed<k>/ when set
};

/// Trains every variant for every seed under the same budget and data, then
/// evaluates all of them on the same samples.
ComparisonReport compare_variants(const netmodel::NetworkConfig& net, const Dataset& train, const Dataset& test,
                                  const training::TrainConfig& train_config, const RolloutEvalConfig& eval_config,
                                  const CompareOptions& options);

}  // namespace jointdyn::evalharness
