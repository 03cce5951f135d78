#pragma once

#include <optional>
#include <vector>

#include "jointdyn/tensor.hpp"

// Differentiable operations. Every op takes an optional Tape; with a null
// tape (or when no input requires a gradient) nothing is recorded and the
// result is a plain value.
namespace jointdyn::tensorgrad {

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  // deconv2d only: extra rows/cols appended at the bottom/right so a decoder
  // can reproduce encoder sizes lost to floor division.
  std::size_t output_padding = 0;
};

/// Output extent of a valid/padded cross-correlation.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const Conv2dGeometry& g);
/// Output extent of the transposed correlation.
std::size_t deconv_output_extent(std::size_t in, std::size_t kernel, const Conv2dGeometry& g);

/// input [C_in,H,W], kernels [C_out,C_in,kH,kW], bias [C_out] -> [C_out,H',W'].
Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernels, const Tensor& bias,
              Conv2dGeometry geometry = {});

/// Transposed convolution, the adjoint of conv2d with the same kernel tensor.
/// input [C_in,H,W], kernels [C_in,C_out,kH,kW], bias [C_out] -> [C_out,H',W'].
Tensor deconv2d(Tape* tape, const Tensor& input, const Tensor& kernels, const Tensor& bias,
                Conv2dGeometry geometry = {});

/// input [n], weights [m,n], optional bias [m] -> [m].
Tensor dense(Tape* tape, const Tensor& input, const Tensor& weights,
             const std::optional<Tensor>& bias);

Tensor relu(Tape* tape, const Tensor& input);
Tensor softmax(Tape* tape, const Tensor& input);
Tensor hadamard(Tape* tape, const Tensor& a, const Tensor& b);

Tensor reshape(Tape* tape, const Tensor& input, Shape shape);
/// Concatenates along axis 0. All parts must agree on the trailing axes.
Tensor concat0(Tape* tape, const std::vector<Tensor>& parts);
/// Elementwise clamp; the gradient is zero where the value was clamped.
Tensor clip(Tape* tape, const Tensor& input, double lo, double hi);
/// Identity in the forward pass, blocks the gradient in the backward pass.
Tensor stop_gradient(const Tensor& input);

/// Scalar ||pred - target||^2. target is treated as a constant.
Tensor squared_error(Tape* tape, const Tensor& pred, const Tensor& target);

/// Log with a first-order Taylor continuation below `threshold`:
/// ln p for p >= threshold, else ln threshold + (p - threshold) / threshold.
double stabilized_log(double p, double threshold);
double stabilized_log_derivative(double p, double threshold);

/// Scalar -sum_l onehot[l] * stabilized_log(probs[l]). onehot is constant.
Tensor cross_entropy_stable(Tape* tape, const Tensor& onehot, const Tensor& probs,
                            double taylor_threshold);

/// Scalar sum_j coeffs[j] * terms[j] over scalar tensors.
Tensor weighted_sum(Tape* tape, const std::vector<Tensor>& terms, const std::vector<double>& coeffs);

}  // namespace jointdyn::tensorgrad
