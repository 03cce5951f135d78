#include "jointdyn/optim.hpp"

#include <cmath>
#include <string>

namespace jointdyn::tensorgrad {

AdamState make_adam_state(const std::vector<Tensor>& params, double beta1, double beta2, double epsilon) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.size(), 0.0);
    s.second_moment.emplace_back(p.size(), 0.0);
  }
  return s;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double learning_rate) {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("adam_step: learning_rate must be > 0");
  if (state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (state.first_moment[p].size() != params[p].size()) {
      throw DimensionError("adam_step: moment buffer " + std::to_string(p) + " shape mismatch");
    }
    for (double g : params[p].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(p) +
                           " at step " + std::to_string(state.step + 1));
      }
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].values();
    const auto grads = params[p].grad();
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      values[i] -= learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) acc += g * g;
  }
  return std::sqrt(acc);
}

double clip_gradients_global_norm(std::vector<Tensor>& params, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("clip_gradients_global_norm: threshold must be > 0");
  const double norm = global_grad_norm(params);
  if (norm > threshold && std::isfinite(threshold)) {
    const double scale = threshold / norm;
    for (auto& p : params) {
      for (double& g : p.grad()) g *= scale;
    }
  }
  return norm;
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace jointdyn::tensorgrad
