#pragma once

// Layer primitives with explicit backward passes. Every backward returns the
// exact gradient of a scalar loss given the gradient w.r.t. the layer output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "multiaxial/nn/tensor.hpp"

namespace multiaxial::nn {

template <class T>
struct ParamGrads {
  Tensor<T> d_input;
  Tensor<T> d_weight;
  Tensor<T> d_bias;
};

namespace detail {

template <class T>
std::vector<T>& workspace(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// col[(c*k + ky)*k + kx][y*W + x] = in[c][y + ky - pad][x + kx - pad]
template <class T>
void im2col(const Tensor<T>& in, int k, T* col) {
  const auto C = in.channels(), H = in.height(), W = in.width();
  const int pad = k / 2;
  const T* src = in.data();
  for (std::int64_t c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * H * W;
        const int dx = kx - pad;
        const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t x_hi = std::min<std::int64_t>(W, W - dx);
        for (std::int64_t y = 0; y < H; ++y) {
          const std::int64_t sy = y + ky - pad;
          T* row = dst + y * W;
          if (sy < 0 || sy >= H || x_lo >= x_hi) {
            std::fill(row, row + W, T{0});
            continue;
          }
          const T* srow = src + (c * H + sy) * W;
          std::fill(row, row + x_lo, T{0});
          std::copy(srow + x_lo + dx, srow + x_hi + dx, row + x_lo);
          std::fill(row + x_hi, row + W, T{0});
        }
      }
}

template <class T>
void col2im(const T* col, int k, Tensor<T>& out) {
  const auto C = out.channels(), H = out.height(), W = out.width();
  const int pad = k / 2;
  T* dst = out.data();
  for (std::int64_t c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * H * W;
        const int dx = kx - pad;
        const std::int64_t x_lo = std::max<std::int64_t>(0, -dx);
        const std::int64_t x_hi = std::min<std::int64_t>(W, W - dx);
        for (std::int64_t y = 0; y < H; ++y) {
          const std::int64_t sy = y + ky - pad;
          if (sy < 0 || sy >= H) continue;
          T* drow = dst + (c * H + sy) * W;
          const T* row = src + y * W;
          for (std::int64_t x = x_lo; x < x_hi; ++x) drow[x + dx] += row[x];
        }
      }
}

template <class T>
void check_conv_shapes(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                       const char* op) {
  const bool ok = in.rank() == 3 && weight.rank() == 4 && weight.dim(1) == in.channels() &&
                  weight.dim(2) == weight.dim(3) && bias.rank() == 1 && bias.dim(0) == weight.dim(0) &&
                  in.height() >= 1 && in.width() >= 1;
  require_shape(ok, op, in.shape(), weight.shape());
}

}  // namespace detail

/// Same-padded stride-1 cross-correlation with an odd square kernel.
/// weight: (out, in, k, k); bias: (out).
template <class T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::check_conv_shapes(in, weight, bias, "conv2d");
  const int k = static_cast<int>(weight.dim(2));
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(k));
  const auto Cout = weight.dim(0), HW = in.height() * in.width();
  const auto rows = weight.dim(1) * k * k;
  Tensor<T> out({Cout, in.height(), in.width()});
  ConstMapRM<T> w(weight.data(), Cout, rows);
  MapRM<T> o(out.data(), Cout, HW);
  if (k == 1) {
    o.noalias() = w * ConstMapRM<T>(in.data(), rows, HW);
  } else {
    auto& col = detail::workspace<T>(static_cast<std::size_t>(rows * HW));
    detail::im2col(in, k, col.data());
    o.noalias() = w * ConstMapRM<T>(col.data(), rows, HW);
  }
  o.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data(), Cout);
  return out;
}

template <class T>
ParamGrads<T> conv2d_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& d_out) {
  const int k = static_cast<int>(weight.dim(2));
  const auto Cout = weight.dim(0), HW = in.height() * in.width();
  const auto rows = weight.dim(1) * k * k;
  require_shape(d_out.rank() == 3 && d_out.channels() == Cout && d_out.height() == in.height() &&
                    d_out.width() == in.width(),
                "conv2d_backward", d_out.shape(), weight.shape());
  ParamGrads<T> g{Tensor<T>(in.shape()), Tensor<T>(weight.shape()), Tensor<T>({Cout})};
  ConstMapRM<T> w(weight.data(), Cout, rows);
  ConstMapRM<T> dy(d_out.data(), Cout, HW);
  MapRM<T> dw(g.d_weight.data(), Cout, rows);
  for (std::int64_t co = 0; co < Cout; ++co) g.d_bias[static_cast<std::size_t>(co)] = row_sum(dy, co);
  if (k == 1) {
    ConstMapRM<T> x(in.data(), rows, HW);
    dw.noalias() = dy * x.transpose();
    MapRM<T>(g.d_input.data(), rows, HW).noalias() = w.transpose() * dy;
    return g;
  }
  auto& col = detail::workspace<T>(static_cast<std::size_t>(rows * HW));
  detail::im2col(in, k, col.data());
  MapRM<T> c(col.data(), rows, HW);
  dw.noalias() = dy * c.transpose();
  c.noalias() = w.transpose() * dy;  // reuse as d_col
  detail::col2im(col.data(), k, g.d_input);
  return g;
}

/// Stride-2 transposed convolution with a 2x2 kernel; doubles H and W.
/// weight: (out, in, 2, 2); bias: (out).
template <class T>
Tensor<T> conv2d_transpose(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias) {
  const bool ok = in.rank() == 3 && weight.rank() == 4 && weight.dim(1) == in.channels() &&
                  weight.dim(2) == 2 && weight.dim(3) == 2 && bias.rank() == 1 && bias.dim(0) == weight.dim(0);
  require_shape(ok, "conv2d_transpose", in.shape(), weight.shape());
  const auto Cout = weight.dim(0), Cin = in.channels(), H = in.height(), W = in.width();
  Tensor<T> out({Cout, 2 * H, 2 * W});
  ConstMapRM<T> x(in.data(), Cin, H * W);
  // Rows of the gathered weight are (tap, out-channel); tap = dy*2 + dx.
  MatrixRM<T> wk(4 * Cout, Cin);
  for (std::int64_t co = 0; co < Cout; ++co)
    for (std::int64_t ci = 0; ci < Cin; ++ci)
      for (int t = 0; t < 4; ++t) wk(t * Cout + co, ci) = weight[static_cast<std::size_t>((co * Cin + ci) * 4 + t)];
  MatrixRM<T> g = wk * x;
  for (int t = 0; t < 4; ++t) {
    const int dy = t / 2, dx = t % 2;
    for (std::int64_t co = 0; co < Cout; ++co) {
      const T b = bias[static_cast<std::size_t>(co)];
      const T* src = g.data() + (t * Cout + co) * H * W;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t xx = 0; xx < W; ++xx) out.at(co, 2 * y + dy, 2 * xx + dx) = src[y * W + xx] + b;
    }
  }
  return out;
}

template <class T>
ParamGrads<T> conv2d_transpose_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& d_out) {
  const auto Cout = weight.dim(0), Cin = in.channels(), H = in.height(), W = in.width();
  require_shape(d_out.rank() == 3 && d_out.channels() == Cout && d_out.height() == 2 * H && d_out.width() == 2 * W,
                "conv2d_transpose_backward", d_out.shape(), weight.shape());
  MatrixRM<T> d(4 * Cout, H * W);
  for (int t = 0; t < 4; ++t) {
    const int dy = t / 2, dx = t % 2;
    for (std::int64_t co = 0; co < Cout; ++co) {
      T* dst = d.data() + (t * Cout + co) * H * W;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t xx = 0; xx < W; ++xx) dst[y * W + xx] = d_out.at(co, 2 * y + dy, 2 * xx + dx);
    }
  }
  MatrixRM<T> wk(4 * Cout, Cin);
  for (std::int64_t co = 0; co < Cout; ++co)
    for (std::int64_t ci = 0; ci < Cin; ++ci)
      for (int t = 0; t < 4; ++t) wk(t * Cout + co, ci) = weight[static_cast<std::size_t>((co * Cin + ci) * 4 + t)];

  ParamGrads<T> g{Tensor<T>(in.shape()), Tensor<T>(weight.shape()), Tensor<T>({Cout})};
  ConstMapRM<T> x(in.data(), Cin, H * W);
  MapRM<T>(g.d_input.data(), Cin, H * W).noalias() = wk.transpose() * d;
  MatrixRM<T> dwk = d * x.transpose();
  for (std::int64_t co = 0; co < Cout; ++co) {
    T sb{0};
    for (int t = 0; t < 4; ++t) sb += row_sum(d, t * Cout + co);
    g.d_bias[static_cast<std::size_t>(co)] = sb;
    for (std::int64_t ci = 0; ci < Cin; ++ci)
      for (int t = 0; t < 4; ++t) g.d_weight[static_cast<std::size_t>((co * Cin + ci) * 4 + t)] = dwk(t * Cout + co, ci);
  }
  return g;
}

/// 2x2 max pooling. `argmax` holds, per output element, the flat input
/// index that won; ties go to the first element in row-major window order.
template <class T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::int64_t> argmax;
};

template <class T>
PoolResult<T> maxpool2(const Tensor<T>& in) {
  if (in.rank() != 3 || in.height() % 2 != 0 || in.width() % 2 != 0)
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_string(in.shape()));
  const auto C = in.channels(), H = in.height() / 2, W = in.width() / 2, Wi = in.width();
  PoolResult<T> r{Tensor<T>({C, H, W}), std::vector<std::int64_t>(static_cast<std::size_t>(C * H * W))};
  std::size_t o = 0;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x, ++o) {
        const std::int64_t base = (c * in.height() + 2 * y) * Wi + 2 * x;
        const std::int64_t cand[4] = {base, base + 1, base + Wi, base + Wi + 1};
        std::int64_t best = cand[0];
        for (int t = 1; t < 4; ++t)
          if (in[static_cast<std::size_t>(cand[t])] > in[static_cast<std::size_t>(best)]) best = cand[t];
        r.output[o] = in[static_cast<std::size_t>(best)];
        r.argmax[o] = best;
      }
  return r;
}

template <class T>
Tensor<T> maxpool2_backward(const Shape& input_shape, const std::vector<std::int64_t>& argmax, const Tensor<T>& d_out) {
  if (argmax.size() != d_out.size()) throw ShapeError("maxpool2_backward: argmax/gradient size mismatch");
  Tensor<T> d_in(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) d_in[static_cast<std::size_t>(argmax[o])] += d_out[o];
  return d_in;
}

enum class Activation { kRelu, kSoftmax };

template <class T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.values()) v = v > T{0} ? v : T{0};
}

template <class T>
Tensor<T> relu(Tensor<T> t) {
  relu_inplace(t);
  return t;
}

/// Gradient of relu given its output (or input: the masks agree).
template <class T>
Tensor<T> relu_backward(const Tensor<T>& output, Tensor<T> d_out) {
  for (std::size_t i = 0; i < d_out.size(); ++i)
    if (!(output[i] > T{0})) d_out[i] = T{0};
  return d_out;
}

/// Softmax over the channel axis at every spatial location.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const auto C = logits.channels(), P = logits.plane();
  Tensor<T> out(logits.shape());
  std::vector<T> m(static_cast<std::size_t>(P), -std::numeric_limits<T>::infinity());
  std::vector<T> s(static_cast<std::size_t>(P), T{0});
  const T* x = logits.data();
  T* y = out.data();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p) m[p] = std::max(m[p], x[c * P + p]);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p) {
      const T e = std::exp(x[c * P + p] - m[p]);
      y[c * P + p] = e;
      s[p] += e;
    }
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p) y[c * P + p] /= s[p];
  return out;
}

template <class T>
Tensor<T> softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& d_out) {
  const auto C = probs.channels(), P = probs.plane();
  Tensor<T> d_in(probs.shape());
  std::vector<T> dot(static_cast<std::size_t>(P), T{0});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p) dot[p] += probs[c * P + p] * d_out[c * P + p];
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p) d_in[c * P + p] = probs[c * P + p] * (d_out[c * P + p] - dot[p]);
  return d_in;
}

template <class T>
Tensor<T> activation(const Tensor<T>& in, Activation kind) {
  return kind == Activation::kRelu ? relu(in) : softmax_channels(in);
}

/// Backward for either activation; needs the forward input and output.
template <class T>
Tensor<T> activation_backward(const Tensor<T>& output, const Tensor<T>& d_out, Activation kind) {
  return kind == Activation::kRelu ? relu_backward(output, d_out) : softmax_channels_backward(output, d_out);
}

/// Kernel-size-1 convolution over a (C_in, ...) field of any spatial rank:
/// out[:, v] = W * in[:, v] + b. weight: (out, in); bias optional (empty).
template <class T>
Tensor<T> pointwise_conv(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_shape(weight.rank() == 2 && in.rank() >= 2 && weight.dim(1) == in.channels(), "pointwise_conv",
                in.shape(), weight.shape());
  if (bias.size() != 0 && (bias.rank() != 1 || bias.dim(0) != weight.dim(0)))
    throw ShapeError("pointwise_conv: bias shape " + shape_string(bias.shape()) + " vs weight " +
                     shape_string(weight.shape()));
  Shape s = in.shape();
  s[0] = weight.dim(0);
  Tensor<T> out(s);
  MapRM<T> o = as_matrix(out);
  o.noalias() = ConstMapRM<T>(weight.data(), weight.dim(0), weight.dim(1)) * as_matrix(in);
  if (bias.size() != 0) o.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data(), bias.dim(0));
  return out;
}

template <class T>
ParamGrads<T> pointwise_conv_backward(const Tensor<T>& in, const Tensor<T>& weight, bool has_bias,
                                      const Tensor<T>& d_out) {
  require_shape(d_out.channels() == weight.dim(0) && d_out.plane() == in.plane(), "pointwise_conv_backward",
                d_out.shape(), weight.shape());
  ParamGrads<T> g{Tensor<T>(in.shape()), Tensor<T>(weight.shape()),
                  has_bias ? Tensor<T>({weight.dim(0)}) : Tensor<T>()};
  ConstMapRM<T> w(weight.data(), weight.dim(0), weight.dim(1));
  auto dy = as_matrix(d_out);
  as_matrix(g.d_input).noalias() = w.transpose() * dy;
  MapRM<T>(g.d_weight.data(), weight.dim(0), weight.dim(1)).noalias() = dy * as_matrix(in).transpose();
  if (has_bias)
    for (std::int64_t co = 0; co < weight.dim(0); ++co) g.d_bias[static_cast<std::size_t>(co)] = row_sum(dy, co);
  return g;
}

/// The consensus merge primitive: (21, D, H, W) -> (7, D, H, W).
template <class T>
Tensor<T> pointwise_conv3d(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (in.rank() != 4) throw ShapeError("pointwise_conv3d: expected (C,D,H,W) input, got " + shape_string(in.shape()));
  return pointwise_conv(in, weight, bias);
}

}  // namespace multiaxial::nn
