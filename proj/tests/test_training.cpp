#include <gtest/gtest.h>

#include <cmath>

#include "jointdyn/gradcheck.hpp"
#include "jointdyn/toyenv.hpp"
#include "jointdyn/training.hpp"
#include "test_util.hpp"

using namespace jointdyn;
using namespace jointdyn::training;
using netmodel::ModelVariant;
using netmodel::NetworkConfig;
using tensorgrad::Shape;
using tensorgrad::Tensor;

namespace {

// Every weight zero: the prediction is the last deconv bias everywhere and
// the reward distribution is softmax(reward head bias).
netmodel::JointModelParams constant_model(double frame_value, std::array<double, 3> head_bias) {
  auto m = netmodel::init_weights(NetworkConfig::test16(3), 1);
  for (auto& p : m.parameters())
    for (auto& v : p.values()) v = 0.0;
  for (auto& v : m.primary.decoder->deconvs.back().bias.values()) v = frame_value;
  for (std::size_t c = 0; c < 3; ++c) (*m.primary.reward_head->bias)[c] = head_bias[c];
  return m;
}

Segment constant_segment(std::size_t T, std::size_t K, std::size_t reward_class) {
  Segment s;
  s.history = 4;
  s.unroll_T = T;
  s.lookahead_K = K;
  for (std::size_t j = 0; j < 4 + T + K - 1; ++j) {
    s.frames.push_back(Tensor(Shape{1, 16, 16}));
    s.actions.push_back(netmodel::one_hot(j % 3, 3));
    s.rewards.push_back(netmodel::one_hot(reward_class, 3));
  }
  return s;
}

const toyenv::GameData& small_data() {
  static const toyenv::GameData data = [] {
    toyenv::EnvConfig env;
    env.resolution = 16;
    env.episode_length = 400;
    return toyenv::make_game_data(env, {toyenv::Policy::epsilon_greedy_path, 0.2}, 4000, 5);
  }();
  return data;
}

std::vector<Segment> small_batch(std::size_t I, std::size_t T, std::size_t K, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Segment> b;
  for (std::size_t i = 0; i < I; ++i) b.push_back(datapipe::sample_segment(small_data().train, 4, T, K, rng));
  return b;
}

}  // namespace

TEST(CrossEntropy, Examples) {
  const double thr = std::exp(-10.0);
  EXPECT_NEAR(cross_entropy_stable(Tensor::vector({0, 0, 1}), Tensor::vector({0.25, 0.25, 0.5}), thr), std::log(2.0),
              1e-15);
  EXPECT_NEAR(cross_entropy_stable(Tensor::vector({0, 0, 1}), Tensor::vector({0.25, 0.25, 0.5}), thr), 0.693147, 1e-6);
  EXPECT_EQ(cross_entropy_stable(Tensor::vector({0, 1, 0}), Tensor::vector({0, 1, 0}), thr), 0.0);
  const double taylor = cross_entropy_stable(Tensor::vector({1, 0, 0}), Tensor::vector({std::exp(-12.0), 0.5, 0.5}), thr);
  EXPECT_NEAR(taylor, 10.0 + (1.0 - std::exp(-2.0)), 1e-9);
  EXPECT_NEAR(taylor, 10.8647, 1e-4);
}

TEST(CompoundLoss, HandConstructedCase) {
  const double beta = std::sqrt(8.0 / 256.0);  // squared frame error 8 over 16x16 pixels
  const auto m = constant_model(beta, {0.0, 0.0, std::log(2.0)});
  const auto g = compound_loss(nullptr, m, {constant_segment(1, 1, 2)}, {});
  EXPECT_NEAR(g.breakdown.total, (8.0 + std::log(2.0)) / 2.0, 1e-9);
  EXPECT_NEAR(g.breakdown.total, 4.346574, 1e-6);
  EXPECT_NEAR(g.breakdown.frame_loss, 4.0, 1e-12);
  EXPECT_NEAR(g.breakdown.reward_loss, std::log(2.0) / 2.0, 1e-12);
}

TEST(CompoundLoss, PerfectPredictionsGiveZero) {
  const auto m = constant_model(0.0, {0.0, 0.0, 1000.0});
  EXPECT_EQ(compound_loss(nullptr, m, {constant_segment(2, 3, 2), constant_segment(2, 3, 2)}, {}).breakdown.total, 0.0);
}

TEST(CompoundLoss, LambdaZeroIsPureFrameLoss) {
  const auto model = netmodel::init_weights(NetworkConfig::test16(3), 3);
  const auto batch = small_batch(3, 2, 2, 1);
  LossOptions o;
  o.lambda_reward = 0.0;
  const auto b = compound_loss(nullptr, model, batch, o).breakdown;
  EXPECT_EQ(b.total, b.frame_loss);
  EXPECT_GT(b.reward_loss, 0.0);
}

TEST(CompoundLoss, NormalizationAcrossK) {
  // Identical per-step errors: the 1/(2ITK) factor keeps the average fixed.
  const auto m = constant_model(0.1, {0.3, -0.2, 0.5});
  const double k1 = compound_loss(nullptr, m, {constant_segment(1, 1, 0)}, {}).breakdown.total;
  const double k2 = compound_loss(nullptr, m, {constant_segment(1, 2, 0)}, {}).breakdown.total;
  const double k4t3 = compound_loss(nullptr, m, {constant_segment(3, 4, 0), constant_segment(3, 4, 0)}, {}).breakdown.total;
  EXPECT_NEAR(k1, k2, 1e-14);
  EXPECT_NEAR(k1, k4t3, 1e-14);
}

TEST(CompoundLoss, PermutationInvariant) {
  const auto model = netmodel::init_weights(NetworkConfig::test16(3), 3);
  auto batch = small_batch(4, 2, 2, 7);
  const double a = compound_loss(nullptr, model, batch, {}).breakdown.total;
  std::swap(batch[0], batch[3]);
  std::swap(batch[1], batch[2]);
  EXPECT_NEAR(compound_loss(nullptr, model, batch, {}).breakdown.total, a, 1e-12);
}

TEST(CompoundLoss, RejectsShortSegmentsAndMixedShapes) {
  const auto model = netmodel::init_weights(NetworkConfig::test16(3), 3);
  auto seg = constant_segment(2, 2, 1);
  seg.frames.pop_back();
  EXPECT_THROW(compound_loss(nullptr, model, {seg}, {}), datapipe::DataError);
  EXPECT_THROW(compound_loss(nullptr, model, {constant_segment(1, 1, 1), constant_segment(1, 2, 1)}, {}),
               datapipe::DataError);
  EXPECT_THROW(compound_loss(nullptr, model, {}, {}), datapipe::DataError);
}

TEST(CompoundLoss, FiniteDifferenceK2) {
  auto model = netmodel::init_weights(NetworkConfig::test16(3), 21);
  const auto batch = small_batch(1, 1, 2, 3);
  auto fn = [&](tensorgrad::Tape* tape, std::vector<Tensor>&) { return compound_loss(tape, model, batch, {}).total; };
  const auto r = tensorgrad::finite_difference_check(fn, model.parameters());
  EXPECT_EQ(r.entries_checked, netmodel::count_parameters(model));
  EXPECT_LT(r.max_relative_error, 1e-3);
}

TEST(CompoundLoss, RewardGradientBoundedByTaylorSlope) {
  // d CE / d p_true is -1/p above the threshold and -1/threshold below it.
  for (double p : {1e-20, 1e-6, 0.01, 0.5}) {
    Tensor probs = Tensor::vector({p, 1 - p - 1e-3, 1e-3});
    probs.set_requires_grad();
    tensorgrad::Tape tape;
    auto ce = tensorgrad::cross_entropy_stable(&tape, Tensor::vector({1, 0, 0}), probs, std::exp(-10.0));
    tape.backward(ce);
    EXPECT_LE(std::abs(probs.grad()[0]), std::exp(10.0) * (1 + 1e-12));
  }
}

TEST(TrainStep, DescendsOnFixedBatch) {
  auto model = netmodel::init_weights(NetworkConfig::test16(3), 4);
  enable_gradients(model);
  const auto batch = small_batch(2, 2, 2, 9);
  const double before = compound_loss(nullptr, model, batch, {}).breakdown.total;
  auto params = model.parameters();
  auto adam = tensorgrad::make_adam_state(params);
  StepSettings s;
  s.learning_rate = 1e-5;
  const auto reported = train_step(model, batch, s, adam);
  EXPECT_EQ(reported.total, before);
  EXPECT_LT(compound_loss(nullptr, model, batch, {}).breakdown.total, before);
}

TEST(TrainStep, NonFiniteLossAbortsWithIteration) {
  auto model = netmodel::init_weights(NetworkConfig::test16(3), 4);
  enable_gradients(model);
  model.primary.encoder_fc.weights[0] = std::nan("");
  auto params = model.parameters();
  auto adam = tensorgrad::make_adam_state(params);
  StepSettings s;
  s.iteration = 77;
  try {
    train_step(model, small_batch(1, 1, 1, 1), s, adam);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("77"), std::string::npos) << e.what();
  }
}

TEST(DecoupledObjective, FrameGradientsIgnoreLambda) {
  for (auto variant : {ModelVariant::decoupled_objective, ModelVariant::decoupled_architecture}) {
    auto model = netmodel::init_weights(NetworkConfig::test16(3), 5, variant);
    const auto batch = small_batch(2, 1, 2, 11);
    LossOptions zero, one;
    zero.lambda_reward = 0.0;
    one.lambda_reward = 1.0;
    const auto gz = loss_gradients(model, batch, zero);
    const auto g1 = loss_gradients(model, batch, one);
    const auto params = model.parameters();
    const auto frame = model.frame_parameters();
    std::size_t frame_checked = 0;
    bool reward_params_moved = false;
    for (std::size_t i = 0; i < params.size(); ++i) {
      bool is_frame = false;
      for (const auto& f : frame) is_frame |= f.same_storage(params[i]);
      if (is_frame) {
        EXPECT_EQ(gz[i], g1[i]) << netmodel::variant_name(variant) << " param " << i;
        ++frame_checked;
      } else {
        reward_params_moved |= gz[i] != g1[i];
      }
    }
    EXPECT_GT(frame_checked, 0u);
    EXPECT_TRUE(reward_params_moved);
  }
}

TEST(Joint, RewardLossReachesSharedParameters) {
  auto model = netmodel::init_weights(NetworkConfig::test16(3), 5, ModelVariant::joint);
  const auto batch = small_batch(2, 1, 2, 11);
  LossOptions zero;
  zero.lambda_reward = 0.0;
  const auto gz = loss_gradients(model, batch, zero);
  const auto g1 = loss_gradients(model, batch, {});
  EXPECT_NE(gz.front(), g1.front());  // encoder.conv0.kernels
}

TEST(Curriculum, PaperSchedule) {
  const auto s = CurriculumSchedule::paper();
  const auto& a = curriculum_lookup(s, 499999);
  EXPECT_EQ(a.lookahead_K, 1u);
  EXPECT_EQ(a.minibatch_I, 32u);
  EXPECT_EQ(a.learning_rate, 1e-4);
  const auto& b = curriculum_lookup(s, 500000);
  EXPECT_EQ(b.lookahead_K, 3u);
  EXPECT_EQ(b.minibatch_I, 8u);
  EXPECT_EQ(b.learning_rate, 1e-5);
  const auto& c = curriculum_lookup(s, 1000000);
  EXPECT_EQ(c.lookahead_K, 5u);
  EXPECT_EQ(c.minibatch_I, 8u);
  EXPECT_EQ(c.learning_rate, 1e-5);
  EXPECT_EQ(curriculum_lookup(s, 0).lookahead_K, 1u);
  EXPECT_EQ(curriculum_lookup(s, 5000000).lookahead_K, 5u);
}

TEST(Curriculum, DeskScheduleAndText) {
  const auto d = CurriculumSchedule::desk();
  EXPECT_EQ(curriculum_lookup(d, 3999).lookahead_K, 1u);
  EXPECT_EQ(curriculum_lookup(d, 3999).minibatch_I, 16u);
  EXPECT_EQ(curriculum_lookup(d, 4000).lookahead_K, 3u);
  EXPECT_EQ(curriculum_lookup(d, 4000).learning_rate, 1e-5);
  EXPECT_EQ(curriculum_lookup(d, 8000).lookahead_K, 5u);
  EXPECT_EQ(TrainConfig{}.total_iterations, 12000u);
  const auto back = CurriculumSchedule::from_text(d.to_text());
  EXPECT_EQ(back.to_text(), d.to_text());
  EXPECT_THROW(CurriculumSchedule::from_text("5:1:16:1e-4"), ConfigError);            // must start at 0
  EXPECT_THROW(CurriculumSchedule::from_text("0:1:16:1e-4,0:3:8:1e-5"), ConfigError);  // not increasing
  EXPECT_THROW(CurriculumSchedule::from_text("0:0:16:1e-4"), ConfigError);
}

TEST(TrainConfigText, RoundTripAndUnknownKeys) {
  TrainConfig c;
  c.lambda_reward = 10;
  c.seed = 9;
  io::KeyValues kv;
  for (const auto& [k, v] : c.to_key_values()) kv[k] = v;
  const auto back = TrainConfig::from_key_values(kv);
  EXPECT_EQ(back.to_key_values(), c.to_key_values());
  kv["nonsense"] = "1";
  EXPECT_THROW(TrainConfig::from_key_values(kv), ConfigError);
  TrainConfig d;
  EXPECT_TRUE(d.apply("lookahead_K", "2"));
  for (const auto& p : d.curriculum.phases) EXPECT_EQ(p.lookahead_K, 2u);
  EXPECT_THROW(d.apply("lambda_reward", "-1"), ConfigError);
  EXPECT_TRUE(d.apply("grad_clip_threshold", "inf"));
}

TEST(TrainLoop, LogLengthDeterminismAndCheckpoints) {
  TrainConfig c;
  c.curriculum = CurriculumSchedule::from_text("0:1:2:1e-4,3:2:2:1e-5");
  c.total_iterations = 6;
  c.unroll_T = 1;
  c.seed = 3;
  auto dir = testutil::temp_dir("trainloop");
  TrainLoopOptions o;
  o.checkpoint_dir = dir;
  const auto a = train_loop(small_data().train, NetworkConfig::test16(3), ModelVariant::joint, c, o);
  const auto b = train_loop(small_data().train, NetworkConfig::test16(3), ModelVariant::joint, c);
  EXPECT_EQ(a.log.size(), 6u);
  EXPECT_EQ(loss_log_csv(a.log), loss_log_csv(b.log));
  EXPECT_EQ(a.log[3].K, 2u);
  EXPECT_EQ(netmodel::serialize_checkpoint(a.model), netmodel::serialize_checkpoint(b.model));
  EXPECT_TRUE(std::filesystem::exists(dir / "final.jdyn"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_iter3.jdyn"));
  c.seed = 4;
  const auto other = train_loop(small_data().train, NetworkConfig::test16(3), ModelVariant::joint, c);
  EXPECT_NE(loss_log_csv(other.log), loss_log_csv(a.log));
}

TEST(TrainLoop, RejectsTooShortData) {
  TrainConfig c;
  c.curriculum = CurriculumSchedule::constant(2000, 1, 1e-4);
  c.total_iterations = 1;
  EXPECT_THROW(train_loop(small_data().train, NetworkConfig::test16(3), ModelVariant::joint, c), datapipe::DataError);
}
