#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jointdyn/tensor.hpp"

namespace jointdyn::tensorgrad {

/// Builds a scalar from the given inputs, recording on `tape` when non-null.
using ScalarFn = std::function<Tensor(Tape* tape, std::vector<Tensor>& inputs)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t kinks_avoided = 0;  // entries whose stencil straddled a kink
};

/// Compares reverse-mode gradients of `fn` against central differences for
/// every entry of every input. Relative error per entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The central
/// difference at epsilon is cross-checked against epsilon/2; when they
/// disagree a kink sits inside the stencil and a Richardson-extrapolated
/// one-sided estimate from the smooth side is used instead.
GradCheckResult finite_difference_check(const ScalarFn& fn, std::vector<Tensor> inputs,
                                        double epsilon = 1e-5, double floor = 1e-6);

struct NamedCheck {
  std::string op;
  GradCheckResult result;
};

/// Runs finite_difference_check on every differentiable op with small
/// random inputs (ReLU inputs kept away from the kink).
std::vector<NamedCheck> check_all_ops(std::uint64_t seed = 1);

}  // namespace jointdyn::tensorgrad
