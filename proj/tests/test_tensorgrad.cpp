#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "jointdyn/gradcheck.hpp"
#include "jointdyn/ops.hpp"
#include "jointdyn/optim.hpp"
#include "test_util.hpp"

using namespace jointdyn;
using namespace jointdyn::tensorgrad;
using testutil::random_away_from_zero;
using testutil::random_tensor;

namespace {

// Reduces any tensor to a scalar with a non-trivial gradient.
Tensor scalarize(Tape* tape, const Tensor& t) {
  return squared_error(tape, t, random_tensor(t.shape(), 999, -0.5, 0.5));
}

GradCheckResult check(const std::function<Tensor(Tape*, std::vector<Tensor>&)>& fn, std::vector<Tensor> inputs) {
  return finite_difference_check(fn, std::move(inputs));
}

}  // namespace

TEST(Hadamard, IdentityAndAnnihilation) {
  const auto a = Tensor::vector({1, 2, 3});
  const auto y = hadamard(nullptr, a, Tensor::vector({1, 1, 1}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 2, 3}));
  const auto z = hadamard(nullptr, random_tensor({7}, 1), Tensor(Shape{7}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Hadamard, ShapeMismatchNamesAxis) {
  try {
    hadamard(nullptr, Tensor(Shape{3}), Tensor(Shape{4}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axis"), std::string::npos) << e.what();
  }
}

TEST(Tensor, RejectsEmptyAxis) { EXPECT_THROW(Tensor(Shape{3, 0}), DimensionError); }

TEST(Softmax, MatchesExtendedPrecision) {
  const auto p = softmax(nullptr, Tensor::vector({1, 2, 3}));
  long double z = 0;
  for (int i = 1; i <= 3; ++i) z += std::exp(static_cast<long double>(i));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(p[i], static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z), 1e-15);
  }
}

TEST(Softmax, NormalizedAndPositive) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = softmax(nullptr, random_tensor({5}, seed, -30, 30));
    double s = 0;
    for (double v : p.values()) {
      EXPECT_GT(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const auto big = softmax(nullptr, Tensor::vector({1000, 0, -1000}));
  EXPECT_TRUE(big.all_finite());
}

TEST(Relu, SubgradientAtZeroIsZero) {
  auto x = Tensor::vector({-1, 0, 2});
  x.set_requires_grad();
  Tape tape;
  auto y = relu(&tape, x);
  auto s = weighted_sum(&tape, {squared_error(&tape, y, Tensor(Shape{3}, -1.0))}, {1.0});
  tape.backward(s);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 2.0 * (2.0 + 1.0));
}

TEST(Conv, OutputExtents) {
  EXPECT_EQ(conv_output_extent(32, 6, {2, 0, 0}), 14u);
  EXPECT_EQ(conv_output_extent(14, 4, {2, 0, 0}), 6u);
  EXPECT_EQ(deconv_output_extent(6, 4, {2, 0, 0}), 14u);
  EXPECT_EQ(deconv_output_extent(14, 6, {2, 0, 0}), 32u);
  EXPECT_EQ(conv_output_extent(39, 6, {2, 0, 0}), 17u);
  EXPECT_EQ(deconv_output_extent(17, 6, {2, 0, 1}), 39u);
}

TEST(Conv, KnownValue) {
  // 1 channel 3x3 input, 2x2 all-ones kernel, stride 1: sliding window sums.
  Tensor x(Shape{1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k(Shape{1, 1, 2, 2}, 1.0);
  const auto y = conv2d(nullptr, x, k, Tensor::vector({0.5}));
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(y[0], 12.5);
  EXPECT_EQ(y[1], 16.5);
  EXPECT_EQ(y[2], 24.5);
  EXPECT_EQ(y[3], 28.5);
}

TEST(Conv, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(nullptr, Tensor(Shape{2, 8, 8}), Tensor(Shape{4, 3, 3, 3}), Tensor(Shape{4})), DimensionError);
  EXPECT_THROW(conv2d(nullptr, Tensor(Shape{3, 2, 2}), Tensor(Shape{4, 3, 3, 3}), Tensor(Shape{4})), DimensionError);
}

struct AdjointCase {
  std::size_t cin, h, w, cout, kernel;
  Conv2dGeometry geom;
};

void PrintTo(const AdjointCase& c, std::ostream* os) {
  *os << c.cin << "x" << c.h << "x" << c.w << " -> " << c.cout << " k" << c.kernel;
}

class Adjointness : public ::testing::TestWithParam<AdjointCase> {};

TEST_P(Adjointness, ConvAndDeconvAreAdjoint) {
  const auto c = GetParam();
  const auto x = random_tensor({c.cin, c.h, c.w}, 1);
  const auto k = random_tensor({c.cout, c.cin, c.kernel, c.kernel}, 2);
  const auto y_shape_probe = conv2d(nullptr, x, k, Tensor(Shape{c.cout}), c.geom);
  const auto y = random_tensor(y_shape_probe.shape(), 3);
  Conv2dGeometry back = c.geom;
  // Recover rows the forward correlation skipped.
  const std::size_t natural = deconv_output_extent(y.dim(1), c.kernel, {c.geom.stride, c.geom.padding, 0});
  back.output_padding = c.h - natural;
  const auto xt = deconv2d(nullptr, y, k, Tensor(Shape{c.cin}), back);
  ASSERT_EQ(xt.shape(), x.shape());
  const double lhs = dot(y_shape_probe, y);
  const double rhs = dot(x, xt);
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
}

INSTANTIATE_TEST_SUITE_P(
    ConfigShapes, Adjointness,
    ::testing::Values(AdjointCase{4, 32, 32, 16, 6, {2, 0, 0}},   // desk conv0
                      AdjointCase{16, 14, 14, 32, 4, {2, 0, 0}},  // desk conv1
                      AdjointCase{4, 16, 16, 4, 4, {2, 0, 0}},    // test16 conv0
                      AdjointCase{4, 7, 7, 8, 3, {2, 0, 0}},      // test16 conv1
                      AdjointCase{4, 84, 84, 64, 8, {2, 0, 0}},   // paper conv0
                      AdjointCase{64, 39, 39, 16, 6, {2, 0, 0}},  // paper conv1, reduced channels
                      AdjointCase{3, 9, 11, 2, 3, {1, 1, 0}},     // padded
                      AdjointCase{2, 10, 10, 3, 3, {3, 0, 0}}),
    [](const ::testing::TestParamInfo<AdjointCase>& i) {
      const auto& c = i.param;
      return "c" + std::to_string(c.cin) + "_" + std::to_string(c.h) + "x" + std::to_string(c.w) + "_k" +
             std::to_string(c.kernel) + "s" + std::to_string(c.geom.stride) + "p" + std::to_string(c.geom.padding);
    });

// Finite-difference checks, one per differentiable op.

TEST(GradCheck, Dense) {
  auto r = check([](Tape* t, std::vector<Tensor>& in) { return scalarize(t, dense(t, in[0], in[1], in[2])); },
                 {random_tensor({6}, 1), random_tensor({4, 6}, 2), random_tensor({4}, 3)});
  EXPECT_LT(r.max_relative_error, 1e-4);
  auto nb = check([](Tape* t, std::vector<Tensor>& in) { return scalarize(t, dense(t, in[0], in[1], std::nullopt)); },
                  {random_tensor({5}, 4), random_tensor({3, 5}, 5)});
  EXPECT_LT(nb.max_relative_error, 1e-4);
}

TEST(GradCheck, Conv2d) {
  auto r = check(
      [](Tape* t, std::vector<Tensor>& in) { return scalarize(t, conv2d(t, in[0], in[1], in[2], {2, 1, 0})); },
      {random_tensor({2, 7, 6}, 1), random_tensor({3, 2, 3, 3}, 2), random_tensor({3}, 3)});
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_EQ(r.entries_checked, 2u * 7 * 6 + 3 * 2 * 9 + 3);
}

TEST(GradCheck, Deconv2d) {
  auto r = check(
      [](Tape* t, std::vector<Tensor>& in) { return scalarize(t, deconv2d(t, in[0], in[1], in[2], {2, 0, 1})); },
      {random_tensor({3, 4, 3}, 1), random_tensor({3, 2, 3, 3}, 2), random_tensor({2}, 3)});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, Relu) {
  auto r = check([](Tape* t, std::vector<Tensor>& in) { return scalarize(t, relu(t, in[0])); },
                 {random_away_from_zero({12}, 1)});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, Softmax) {
  auto r = check([](Tape* t, std::vector<Tensor>& in) { return scalarize(t, softmax(t, in[0])); },
                 {random_tensor({5}, 1, -2, 2)});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, Hadamard) {
  auto r = check([](Tape* t, std::vector<Tensor>& in) { return scalarize(t, hadamard(t, in[0], in[1])); },
                 {random_tensor({8}, 1), random_tensor({8}, 2)});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, ReshapeAndConcat) {
  auto r = check(
      [](Tape* t, std::vector<Tensor>& in) {
        auto a = reshape(t, in[0], {2, 3});
        return scalarize(t, concat0(t, {a, in[1]}));
      },
      {random_tensor({6}, 1), random_tensor({1, 3}, 2)});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, Clip) {
  auto r = check([](Tape* t, std::vector<Tensor>& in) { return scalarize(t, clip(t, in[0], -0.5, 0.5)); },
                 {Tensor::vector({-0.9, -0.3, 0.1, 0.4, 0.8, 2.0})});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, CrossEntropyBothRegimes) {
  const auto onehot = Tensor::vector({0, 1, 0});
  for (double p1 : {0.3, 1e-6}) {  // 1e-6 < e^-10 exercises the Taylor branch
    auto r = check(
        [&](Tape* t, std::vector<Tensor>& in) { return cross_entropy_stable(t, onehot, in[0], std::exp(-10.0)); },
        {Tensor::vector({0.5, p1, 0.2})});
    EXPECT_LT(r.max_relative_error, 1e-4) << p1;
  }
}

TEST(GradCheck, WeightedSum) {
  auto r = check(
      [](Tape* t, std::vector<Tensor>& in) {
        return weighted_sum(t, {scalarize(t, in[0]), scalarize(t, hadamard(t, in[0], in[1]))}, {0.5, 2.0});
      },
      {random_tensor({4}, 1), random_tensor({4}, 2)});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(StopGradient, BlocksOnlyTheMarkedPath) {
  auto x = random_tensor({3}, 1);
  x.set_requires_grad();
  Tape tape;
  auto y = weighted_sum(&tape, {scalarize(&tape, stop_gradient(x))}, {1.0});
  EXPECT_FALSE(y.requires_grad());
  auto z = weighted_sum(&tape, {scalarize(&tape, x), scalarize(&tape, stop_gradient(x))}, {1.0, 1.0});
  tape.backward(z);
  auto direct = x.clone();
  direct.set_requires_grad();
  Tape t2;
  auto w = scalarize(&t2, direct);
  t2.backward(w);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], direct.grad()[i]);
}

TEST(StabilizedLog, BranchesAndSlopeBound) {
  const double thr = std::exp(-10.0);
  EXPECT_DOUBLE_EQ(stabilized_log(0.5, thr), std::log(0.5));
  EXPECT_NEAR(-stabilized_log(std::exp(-12.0), thr), 10.0 + (1.0 - std::exp(-2.0)), 1e-12);
  for (double p : {0.0, 1e-300, 1e-8, thr, 0.1, 1.0}) {
    EXPECT_LE(std::abs(stabilized_log_derivative(p, thr)), std::exp(10.0) * (1 + 1e-12));
  }
}

TEST(Clipping, ExamplesAndIdempotence) {
  Tensor a = Tensor::vector({0, 0}), b = Tensor::vector({0});
  a.set_requires_grad();
  b.set_requires_grad();
  std::vector<Tensor> params{a, b};
  a.grad()[0] = 0.3;
  a.grad()[1] = 0.4;  // norm 0.5
  EXPECT_DOUBLE_EQ(clip_gradients_global_norm(params, 1.0), 0.5);
  EXPECT_EQ(a.grad()[0], 0.3);
  EXPECT_EQ(a.grad()[1], 0.4);

  a.grad()[0] = 0.0;
  a.grad()[1] = 4.0;
  b.grad()[0] = 0.0;
  EXPECT_DOUBLE_EQ(clip_gradients_global_norm(params, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 1.0);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    for (auto& p : params)
      for (auto& g : p.grad()) g = rng.uniform(-3, 3);
    const double before = global_grad_norm(params);
    clip_gradients_global_norm(params, 1.0);
    EXPECT_NEAR(global_grad_norm(params), std::min(before, 1.0), 1e-12);
    std::vector<double> once(a.grad().begin(), a.grad().end());
    clip_gradients_global_norm(params, 1.0);
    EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), once);
  }
}

TEST(Clipping, InfiniteThresholdKeepsDirection) {
  Tensor a = Tensor::vector({0, 0, 0});
  a.set_requires_grad();
  std::vector<Tensor> params{a};
  for (std::size_t i = 0; i < 3; ++i) a.grad()[i] = 3.0 * (i + 1.0);
  const std::vector<double> raw(a.grad().begin(), a.grad().end());
  clip_gradients_global_norm(params, std::numeric_limits<double>::infinity());
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), raw);
  clip_gradients_global_norm(params, 1.0);
  const double ratio = a.grad()[0] / raw[0];
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.grad()[i], ratio * raw[i], 1e-15);
}

TEST(Adam, FirstStepMagnitude) {
  Tensor w = Tensor::scalar(0.25);
  w.set_requires_grad();
  std::vector<Tensor> params{w};
  auto state = make_adam_state(params);
  w.grad()[0] = 1.0;
  adam_step(params, state, 1e-4);
  // m_hat = 1, v_hat = 1, update = lr * 1 / (1 + eps).
  EXPECT_NEAR(0.25 - w[0], 1e-4, 1e-9);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor w = random_tensor({5}, 1);
  w.set_requires_grad();
  const auto before = w.clone();
  std::vector<Tensor> params{w};
  auto state = make_adam_state(params);
  for (int i = 0; i < 3; ++i) adam_step(params, state, 1e-3);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(w[i], before[i]);
}

TEST(Adam, NonFiniteGradientAbortsWithoutUpdate) {
  Tensor w = Tensor::vector({1, 2});
  w.set_requires_grad();
  std::vector<Tensor> params{w};
  auto state = make_adam_state(params);
  w.grad()[0] = 1.0;
  w.grad()[1] = std::nan("");
  EXPECT_THROW(adam_step(params, state, 1e-3), NumericError);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, DeterministicTrajectories) {
  auto run = [] {
    Tensor w = random_tensor({10}, 3);
    w.set_requires_grad();
    std::vector<Tensor> params{w};
    auto state = make_adam_state(params);
    for (int it = 0; it < 20; ++it) {
      zero_grads(params);
      Tape tape;
      auto loss = scalarize(&tape, relu(&tape, w));
      tape.backward(loss);
      clip_gradients_global_norm(params, 1.0);
      adam_step(params, state, 1e-2);
    }
    return std::vector<double>(w.values().begin(), w.values().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, KinkInsideStencilUsesSmoothSide) {
  // relu(x - 0.5) at x = 0.5 + 3e-6: the central stencil at 1e-5 spans the
  // kink and would read ~0.65 instead of 1.
  auto fn = [](Tape* t, std::vector<Tensor>& in) {
    return weighted_sum(t, {relu(t, weighted_sum(t, {in[0], Tensor::scalar(1.0)}, {1.0, -0.5}))}, {1.0});
  };
  const auto r = finite_difference_check(fn, {Tensor::vector({0.5 + 3e-6})});
  EXPECT_LT(r.max_relative_error, 1e-6);
  EXPECT_EQ(r.kinks_avoided, 1u);
  const auto smooth = finite_difference_check(fn, {Tensor::vector({0.9})});
  EXPECT_EQ(smooth.kinks_avoided, 0u);
}

TEST(GradCheck, AllOpsPass) {
  for (const auto& c : check_all_ops(3)) EXPECT_LT(c.result.max_relative_error, 1e-4) << c.op;
}
