#include "jointdyn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "jointdyn/ops.hpp"
#include "jointdyn/random.hpp"

namespace jointdyn::tensorgrad {

GradCheckResult finite_difference_check(const ScalarFn& fn, std::vector<Tensor> inputs, double epsilon,
                                        double floor) {
  for (auto& in : inputs) in.set_requires_grad();
  Tape tape;
  Tensor root = fn(&tape, inputs);
  tape.backward(root);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

  const double center = fn(nullptr, inputs).item();
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto at = [&](double delta) {
        values[i] = saved + delta;
        const double v = fn(nullptr, inputs).item();
        values[i] = saved;
        return v;
      };
      const double h = epsilon;
      const double up = at(h), down = at(-h), up2 = at(h / 2), down2 = at(-h / 2);
      const double d1 = (up - down) / (2 * h), d2 = (up2 - down2) / h;
      const double noise = 64 * std::numeric_limits<double>::epsilon() * (std::abs(center) + 1.0) / h;
      double numeric;
      if (std::abs(d1 - d2) <= std::max(1e-4 * std::max(std::abs(d1), std::abs(d2)), noise)) {
        numeric = d1;
      } else {
        // A kink (ReLU) lies inside the stencil on one side of x. The other
        // side's one-sided differences at h and h/2 still agree; use it.
        const double f1 = (up - center) / h, f2 = (up2 - center) / (h / 2);
        const double b1 = (center - down) / h, b2 = (center - down2) / (h / 2);
        numeric = std::abs(f1 - f2) < std::abs(b1 - b2) ? 2 * f2 - f1 : 2 * b2 - b1;
        ++result.kinks_avoided;
      }

      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
      result.max_relative_error = std::max(result.max_relative_error, rel_err);
      ++result.entries_checked;
    }
  }
  return result;
}

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces an op output to a scalar with a fixed random projection so every
// output entry contributes a distinct weight.
Tensor project(Tape* tape, const Tensor& out, const Tensor& target) { return squared_error(tape, out, target); }

}  // namespace

std::vector<NamedCheck> check_all_ops(std::uint64_t seed) {
  Rng rng(seed);
  struct Case {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Tensor(Tape*, std::vector<Tensor>&)> out;
  };
  Tensor away(Shape{16});
  for (auto& x : away.values()) x = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.05, 1.0);
  const double thr = std::exp(-10.0);
  const auto onehot = Tensor::vector({0, 0, 1});

  std::vector<Case> cases;
  cases.push_back({"dense", {random_tensor({7}, rng), random_tensor({5, 7}, rng), random_tensor({5}, rng)},
                   [](Tape* t, auto& in) { return dense(t, in[0], in[1], in[2]); }});
  cases.push_back({"conv2d", {random_tensor({2, 9, 9}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
                   [](Tape* t, auto& in) { return conv2d(t, in[0], in[1], in[2], {2, 1, 0}); }});
  cases.push_back({"deconv2d",
                   {random_tensor({3, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({2}, rng)},
                   [](Tape* t, auto& in) { return deconv2d(t, in[0], in[1], in[2], {2, 0, 1}); }});
  cases.push_back({"relu", {away}, [](Tape* t, auto& in) { return relu(t, in[0]); }});
  cases.push_back({"softmax", {random_tensor({4}, rng, -2, 2)}, [](Tape* t, auto& in) { return softmax(t, in[0]); }});
  cases.push_back({"hadamard", {random_tensor({6}, rng), random_tensor({6}, rng)},
                   [](Tape* t, auto& in) { return hadamard(t, in[0], in[1]); }});
  cases.push_back({"reshape+concat", {random_tensor({6}, rng), random_tensor({1, 3}, rng)},
                   [](Tape* t, auto& in) { return concat0(t, {reshape(t, in[0], {2, 3}), in[1]}); }});
  cases.push_back({"clip", {Tensor::vector({-0.9, -0.2, 0.3, 0.7})},
                   [](Tape* t, auto& in) { return clip(t, in[0], -0.5, 0.5); }});
  cases.push_back({"cross_entropy", {Tensor::vector({0.2, 0.3, 0.5})},
                   [&](Tape* t, auto& in) { return cross_entropy_stable(t, onehot, in[0], thr); }});
  cases.push_back({"cross_entropy_taylor", {Tensor::vector({0.4, 0.6, 1e-7})},
                   [&](Tape* t, auto& in) { return cross_entropy_stable(t, onehot, in[0], thr); }});
  cases.push_back({"weighted_sum", {Tensor::vector({0.4}), Tensor::vector({-1.3})},
                   [](Tape* t, auto& in) { return weighted_sum(t, {in[0], in[1]}, {0.3, 2.0}); }});

  std::vector<NamedCheck> out;
  for (auto& c : cases) {
    // Probe the output shape once to build the projection target.
    const Tensor probe = c.out(nullptr, c.inputs);
    const bool scalar = probe.size() == 1 && (c.name == "cross_entropy" || c.name == "cross_entropy_taylor" ||
                                              c.name == "weighted_sum");
    const Tensor target = random_tensor(probe.shape(), rng, -0.5, 0.5);
    auto fn = [&](Tape* t, std::vector<Tensor>& in) {
      Tensor y = c.out(t, in);
      return scalar ? y : project(t, y, target);
    };
    out.push_back({c.name, finite_difference_check(fn, c.inputs)});
  }
  return out;
}

}  // namespace jointdyn::tensorgrad
