#include "jointdyn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace jointdyn::tensorgrad {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw DimensionError("tensor axis " + std::to_string(i) + " has extent 0 in " +
                           shape_string(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : s_(std::make_shared<TensorStorage>()) {
  validate_shape(shape);
  s_->values.assign(shape_size(shape), fill);
  s_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : s_(std::make_shared<TensorStorage>()) {
  validate_shape(shape);
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  s_->shape = std::move(shape);
  s_->values.assign(values.begin(), values.end());
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return s_->values[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  s_->requires_grad = on;
  if (on) {
    s_->grad.assign(s_->values.size(), 0.0);
  } else {
    s_->grad.clear();
  }
  return *this;
}

void Tensor::zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }

Tensor Tensor::clone() const {
  Tensor t;
  t.s_ = std::make_shared<TensorStorage>();
  t.s_->shape = s_->shape;
  t.s_->values = s_->values;
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(s_->values.begin(), s_->values.end(), [](double v) { return std::isfinite(v); });
}

void Tape::backward(Tensor& root) {
  if (!root.requires_grad()) throw std::logic_error("backward() on a tensor without gradient tracking");
  if (root.size() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_string(root.shape()));
  root.grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("dot: sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace jointdyn::tensorgrad
