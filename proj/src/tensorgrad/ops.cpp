#include "jointdyn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace jointdyn::tensorgrad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

bool tracking(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

void require_axis(bool ok, const char* op, const std::string& axis, std::size_t expected,
                  std::size_t got) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": axis " + axis + " expected " + std::to_string(expected) +
                         ", got " + std::to_string(got));
  }
}

struct ConvDims {
  std::size_t channels, height, width;  // image side
  std::size_t kh, kw;
  std::size_t out_h, out_w;  // column side (sliding positions)
};

// Column matrix [channels*kh*kw, out_h*out_w] of zero-padded patches.
void im2col(std::span<const double> image, const ConvDims& d, const Conv2dGeometry& g,
            Buffer& cols) {
  const std::size_t npos = d.out_h * d.out_w;
  cols.assign(d.channels * d.kh * d.kw * npos, 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < d.channels; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* row = cols.data() + ((c * d.kh + i) * d.kw + j) * npos;
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.height)) continue;
          const double* src = image.data() + (c * d.height + static_cast<std::size_t>(y)) * d.width;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) - pad;
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(d.width)) continue;
            row[oy * d.out_w + ox] = src[x];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(std::span<const double> cols, const ConvDims& d, const Conv2dGeometry& g,
            std::span<double> image) {
  const std::size_t npos = d.out_h * d.out_w;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < d.channels; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* row = cols.data() + ((c * d.kh + i) * d.kw + j) * npos;
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.height)) continue;
          double* dst = image.data() + (c * d.height + static_cast<std::size_t>(y)) * d.width;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) - pad;
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(d.width)) continue;
            dst[x] += row[oy * d.out_w + ox];
          }
        }
      }
    }
  }
}

void check_geometry(const Conv2dGeometry& g, const char* op) {
  if (g.stride == 0) throw DimensionError(std::string(op) + ": stride must be positive");
  if (g.output_padding >= g.stride && g.output_padding != 0) {
    throw DimensionError(std::string(op) + ": output_padding must be smaller than stride");
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const Conv2dGeometry& g) {
  const std::size_t padded = in + 2 * g.padding;
  if (g.stride == 0 || padded < kernel) return 0;
  return (padded - kernel) / g.stride + 1;
}

std::size_t deconv_output_extent(std::size_t in, std::size_t kernel, const Conv2dGeometry& g) {
  const std::size_t full = (in - 1) * g.stride + kernel + g.output_padding;
  if (full <= 2 * g.padding) return 0;
  return full - 2 * g.padding;
}

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernels, const Tensor& bias,
              Conv2dGeometry geometry) {
  constexpr const char* op = "conv2d";
  check_geometry(geometry, op);
  if (geometry.output_padding != 0) throw DimensionError("conv2d: output_padding is deconv2d-only");
  require_rank(input, 3, op, "input");
  require_rank(kernels, 4, op, "kernels");
  require_rank(bias, 1, op, "bias");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  require_axis(kernels.dim(1) == cin, op, "kernels[1] (input channels)", cin, kernels.dim(1));
  require_axis(bias.dim(0) == cout, op, "bias[0] (output channels)", cout, bias.dim(0));
  const std::size_t oh = conv_output_extent(h, kh, geometry);
  const std::size_t ow = conv_output_extent(w, kw, geometry);
  require_axis(oh >= 1, op, "input[1] (height)", kh, h + 2 * geometry.padding);
  require_axis(ow >= 1, op, "input[2] (width)", kw, w + 2 * geometry.padding);

  const ConvDims d{cin, h, w, kh, kw, oh, ow};
  const std::size_t patch = cin * kh * kw, npos = oh * ow;
  Buffer cols;
  im2col(input.values(), d, geometry, cols);

  Tensor out(Shape{cout, oh, ow});
  MapRM y(out.values().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(npos));
  CMapRM wm(kernels.values().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(patch));
  CMapRM cm(cols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npos));
  y.noalias() = wm * cm;
  for (std::size_t c = 0; c < cout; ++c) y.row(static_cast<Eigen::Index>(c)).array() += bias[c];

  if (tracking(tape, {&input, &kernels, &bias})) {
    out.set_requires_grad();
    tape->record([=, cols = std::move(cols)]() mutable {
      CMapRM dy(out.grad().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(npos));
      CMapRM cm(cols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npos));
      Tensor k = kernels;
      Tensor b = bias;
      Tensor x = input;
      if (k.requires_grad()) {
        MapRM dw(k.grad().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(patch));
        dw.noalias() += dy * cm.transpose();
      }
      if (b.requires_grad()) {
        for (std::size_t c = 0; c < cout; ++c) b.grad()[c] += dy.row(static_cast<Eigen::Index>(c)).sum();
      }
      if (x.requires_grad()) {
        CMapRM wm(k.values().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(patch));
        Buffer dcols(patch * npos);
        MapRM dc(dcols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npos));
        dc.noalias() = wm.transpose() * dy;
        col2im(dcols, d, geometry, x.grad());
      }
    });
  }
  return out;
}

Tensor deconv2d(Tape* tape, const Tensor& input, const Tensor& kernels, const Tensor& bias,
                Conv2dGeometry geometry) {
  constexpr const char* op = "deconv2d";
  check_geometry(geometry, op);
  require_rank(input, 3, op, "input");
  require_rank(kernels, 4, op, "kernels");
  require_rank(bias, 1, op, "bias");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(1), kh = kernels.dim(2), kw = kernels.dim(3);
  require_axis(kernels.dim(0) == cin, op, "kernels[0] (input channels)", cin, kernels.dim(0));
  require_axis(bias.dim(0) == cout, op, "bias[0] (output channels)", cout, bias.dim(0));
  const std::size_t oh = deconv_output_extent(h, kh, geometry);
  const std::size_t ow = deconv_output_extent(w, kw, geometry);
  require_axis(oh >= 1, op, "output[1] (height)", 1, oh);
  require_axis(ow >= 1, op, "output[2] (width)", 1, ow);

  // Column geometry is that of the forward conv mapping the output image back
  // onto the input grid.
  const ConvDims d{cout, oh, ow, kh, kw, h, w};
  const std::size_t patch = cout * kh * kw, npos = h * w;

  Buffer cols(patch * npos);
  {
    CMapRM wm(kernels.values().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(patch));
    CMapRM xm(input.values().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(npos));
    MapRM cm(cols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npos));
    cm.noalias() = wm.transpose() * xm;
  }
  Tensor out(Shape{cout, oh, ow});
  col2im(cols, d, geometry, out.values());
  for (std::size_t c = 0; c < cout; ++c) {
    auto plane = out.values().subspan(c * oh * ow, oh * ow);
    for (double& v : plane) v += bias[c];
  }

  if (tracking(tape, {&input, &kernels, &bias})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Buffer dcols;
      im2col(out.grad(), d, geometry, dcols);
      CMapRM dc(dcols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(npos));
      Tensor k = kernels;
      Tensor b = bias;
      Tensor x = input;
      if (k.requires_grad()) {
        CMapRM xm(x.values().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(npos));
        MapRM dw(k.grad().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(patch));
        dw.noalias() += xm * dc.transpose();
      }
      if (b.requires_grad()) {
        const auto g = out.grad();
        for (std::size_t c = 0; c < cout; ++c) {
          double acc = 0.0;
          for (std::size_t i = 0; i < oh * ow; ++i) acc += g[c * oh * ow + i];
          b.grad()[c] += acc;
        }
      }
      if (x.requires_grad()) {
        CMapRM wm(k.values().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(patch));
        MapRM dx(x.grad().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(npos));
        dx.noalias() += wm * dc;
      }
    });
  }
  return out;
}

Tensor dense(Tape* tape, const Tensor& input, const Tensor& weights, const std::optional<Tensor>& bias) {
  constexpr const char* op = "dense";
  require_rank(input, 1, op, "input");
  require_rank(weights, 2, op, "weights");
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  require_axis(input.dim(0) == n, op, "input[0]", n, input.dim(0));
  if (bias) {
    require_rank(*bias, 1, op, "bias");
    require_axis(bias->dim(0) == m, op, "bias[0]", m, bias->dim(0));
  }
  Tensor out(Shape{m});
  CMapRM wm(weights.values().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  CVecMap x(input.values().data(), static_cast<Eigen::Index>(n));
  VecMap y(out.values().data(), static_cast<Eigen::Index>(m));
  y.noalias() = wm * x;
  if (bias) y += CVecMap(bias->values().data(), static_cast<Eigen::Index>(m));

  const Tensor no_bias;
  const Tensor& b = bias ? *bias : no_bias;
  if (tracking(tape, {&input, &weights, &b})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      CVecMap dy(out.grad().data(), static_cast<Eigen::Index>(m));
      Tensor wt = weights;
      Tensor x = input;
      Tensor bb = b;
      if (wt.requires_grad()) {
        MapRM dw(wt.grad().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        dw.noalias() += dy * CVecMap(x.values().data(), static_cast<Eigen::Index>(n)).transpose();
      }
      if (bb.defined() && bb.requires_grad()) {
        VecMap(bb.grad().data(), static_cast<Eigen::Index>(m)) += dy;
      }
      if (x.requires_grad()) {
        CMapRM wm(wt.values().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        VecMap(x.grad().data(), static_cast<Eigen::Index>(n)).noalias() += wm.transpose() * dy;
      }
    });
  }
  return out;
}

Tensor relu(Tape* tape, const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  if (tracking(tape, {&input})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Tensor x = input;
      auto gx = x.grad();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (x[i] > 0.0) gx[i] += gy[i];
      }
    });
  }
  return out;
}

Tensor softmax(Tape* tape, const Tensor& input) {
  require_rank(input, 1, "softmax", "input");
  if (input.dim(0) < 2) throw DimensionError("softmax: axis 0 needs at least 2 entries");
  const std::size_t n = input.size();
  Tensor out(input.shape());
  const double mx = *std::max_element(input.values().begin(), input.values().end());
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(input[i] - mx);
    z += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= z;
  if (tracking(tape, {&input})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Tensor x = input;
      const auto gy = out.grad();
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += gy[i] * out[i];
      for (std::size_t i = 0; i < n; ++i) x.grad()[i] += out[i] * (gy[i] - s);
    });
  }
  return out;
}

namespace {

std::string first_mismatch(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    return "rank " + std::to_string(a.size()) + " vs " + std::to_string(b.size());
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return "axis " + std::to_string(i) + ": " + std::to_string(a[i]) + " vs " + std::to_string(b[i]);
  }
  return "equal";
}

}  // namespace

Tensor hadamard(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("hadamard: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                         " differ at " + first_mismatch(a.shape(), b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  if (tracking(tape, {&a, &b})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Tensor x = a;
      Tensor y = b;
      const auto g = out.grad();
      if (x.requires_grad()) {
        for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i] * y[i];
      }
      if (y.requires_grad()) {
        for (std::size_t i = 0; i < g.size(); ++i) y.grad()[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor reshape(Tape* tape, const Tensor& input, Shape shape) {
  if (shape_size(shape) != input.size()) {
    throw DimensionError("reshape: " + shape_string(input.shape()) + " to " + shape_string(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(input.values().begin(), input.values().end()));
  if (tracking(tape, {&input})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Tensor x = input;
      const auto g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i];
    });
  }
  return out;
}

Tensor concat0(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat0: no inputs");
  const Shape& first = parts.front().shape();
  Shape shape = first;
  shape[0] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat0: trailing axes " + shape_string(p.shape()) + " vs " +
                           shape_string(first));
    }
    shape[0] += p.dim(0);
  }
  Tensor out(shape);
  std::size_t offset = 0;
  bool track = false;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
    track = track || tracking(tape, {&p});
  }
  if (track) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      std::size_t off = 0;
      const auto g = out.grad();
      for (auto p : parts) {
        if (p.requires_grad()) {
          for (std::size_t i = 0; i < p.size(); ++i) p.grad()[i] += g[off + i];
        }
        off += p.size();
      }
    });
  }
  return out;
}

Tensor clip(Tape* tape, const Tensor& input, double lo, double hi) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = std::clamp(input[i], lo, hi);
  if (tracking(tape, {&input})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Tensor x = input;
      const auto g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] >= lo && x[i] <= hi) x.grad()[i] += g[i];
      }
    });
  }
  return out;
}

Tensor stop_gradient(const Tensor& input) { return input.clone(); }

Tensor squared_error(Tape* tape, const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size()) {
    throw DimensionError("squared_error: shapes " + shape_string(pred.shape()) + " and " +
                         shape_string(target.shape()) + " differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc);
  if (tracking(tape, {&pred})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Tensor p = pred;
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < p.size(); ++i) p.grad()[i] += 2.0 * g * (p[i] - target[i]);
    });
  }
  return out;
}

double stabilized_log(double p, double threshold) {
  if (p >= threshold) return std::log(p);
  return std::log(threshold) + (p - threshold) / threshold;
}

double stabilized_log_derivative(double p, double threshold) {
  return p >= threshold ? 1.0 / p : 1.0 / threshold;
}

Tensor cross_entropy_stable(Tape* tape, const Tensor& onehot, const Tensor& probs, double taylor_threshold) {
  if (onehot.size() != probs.size()) {
    throw DimensionError("cross_entropy_stable: axis 0 expected " + std::to_string(probs.size()) +
                         ", got " + std::to_string(onehot.size()));
  }
  double acc = 0.0;
  for (std::size_t l = 0; l < probs.size(); ++l) {
    if (onehot[l] != 0.0) acc -= onehot[l] * stabilized_log(probs[l], taylor_threshold);
  }
  Tensor out = Tensor::scalar(acc);
  if (tracking(tape, {&probs})) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      Tensor p = probs;
      const double g = out.grad()[0];
      for (std::size_t l = 0; l < p.size(); ++l) {
        if (onehot[l] != 0.0) p.grad()[l] -= g * onehot[l] * stabilized_log_derivative(p[l], taylor_threshold);
      }
    });
  }
  return out;
}

Tensor weighted_sum(Tape* tape, const std::vector<Tensor>& terms, const std::vector<double>& coeffs) {
  if (terms.size() != coeffs.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(terms.size()) + " terms, " +
                         std::to_string(coeffs.size()) + " coefficients");
  }
  double acc = 0.0;
  bool track = false;
  for (std::size_t j = 0; j < terms.size(); ++j) {
    acc += coeffs[j] * terms[j].item();
    track = track || tracking(tape, {&terms[j]});
  }
  Tensor out = Tensor::scalar(acc);
  if (track) {
    out.set_requires_grad();
    tape->record([=]() mutable {
      const double g = out.grad()[0];
      for (std::size_t j = 0; j < terms.size(); ++j) {
        Tensor t = terms[j];
        if (t.requires_grad()) t.grad()[0] += coeffs[j] * g;
      }
    });
  }
  return out;
}

}  // namespace jointdyn::tensorgrad
