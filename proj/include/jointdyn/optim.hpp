#pragma once

#include <cstdint>
#include <vector>

#include "jointdyn/tensor.hpp"

namespace jointdyn::tensorgrad {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

AdamState make_adam_state(const std::vector<Tensor>& params, double beta1 = 0.9,
                          double beta2 = 0.95, double epsilon = 1e-8);

/// Bias-corrected Adam update of every parameter from its gradient buffer.
/// Throws NumericError before touching anything if a gradient is not finite.
void adam_step(std::vector<Tensor>& params, AdamState& state, double learning_rate);

double global_grad_norm(const std::vector<Tensor>& params);

/// Rescales all gradients by threshold/norm when the global L2 norm exceeds
/// threshold. Returns the norm measured before clipping.
double clip_gradients_global_norm(std::vector<Tensor>& params, double threshold);

void zero_grads(std::vector<Tensor>& params);

}  // namespace jointdyn::tensorgrad
