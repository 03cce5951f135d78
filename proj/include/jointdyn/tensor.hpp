#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace jointdyn {

/// Raised when tensor shapes do not agree. The message names the offending axis.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value that must be finite is not (loss, gradient, parameter).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace tensorgrad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Every buffer starts on the same SIMD boundary, so vectorized reductions
/// sum in the same order from run to run.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct TensorStorage {
  Shape shape;
  Buffer values;
  Buffer grad;  // empty unless requires_grad
  bool requires_grad = false;
};

/// Handle to a shared n-d array of doubles in row-major order.
///
/// Copies of a Tensor alias the same storage. Ops never mutate their inputs'
/// values; only the optimizer writes parameter values in place.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor vector(std::initializer_list<double> v) {
    return Tensor(Shape{v.size()}, std::vector<double>(v));
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->values.size(); }

  std::span<double> values() { return s_->values; }
  std::span<const double> values() const { return s_->values; }
  double& operator[](std::size_t i) { return s_->values[i]; }
  double operator[](std::size_t i) const { return s_->values[i]; }
  double item() const;

  bool requires_grad() const { return s_ && s_->requires_grad; }
  /// Enables gradient tracking and allocates a zeroed gradient buffer.
  Tensor& set_requires_grad(bool on = true);
  std::span<double> grad() { return s_->grad; }
  std::span<const double> grad() const { return s_->grad; }
  void zero_grad();

  /// Deep copy with tracking disabled.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  bool all_finite() const;

 private:
  std::shared_ptr<TensorStorage> s_;
};

/// Records backward closures in forward order; backward() replays them in
/// reverse. Each recorded op runs its backward exactly once per pass.
class Tape {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

  /// Seeds d(root)/d(root) = 1 and propagates to every tracked tensor.
  void backward(Tensor& root);
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

double dot(const Tensor& a, const Tensor& b);

}  // namespace tensorgrad
}  // namespace jointdyn
