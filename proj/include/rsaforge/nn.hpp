#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "rsaforge/errors.hpp"
#include "rsaforge/tensor.hpp"

// Hand-written forward and backward passes for each layer of the network.
// There is no autodiff here: every backward is the layer's analytic gradient,
// and each one is checked against central finite differences in the tests.
//
// Convolution and pooling use floor output sizing,
//   out = floor((in + 2*pad - k) / stride) + 1,
// so stride-2 layers accept both odd and even inputs.

namespace rsaforge::nn {

// ---------------------------------------------------------------------------
// Matmul plumbing. C[M,N] = A[M,K] * B[K,N], row-major. The k loop is the
// outer accumulation loop, so every output element is summed in a fixed
// order no matter how the compiler vectorizes the j loop.
// ---------------------------------------------------------------------------

inline void matmul(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  std::fill(c, c + m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float aik = ai[kk];
      const float* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

inline void matmul_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                       std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float aik = ai[kk];
      const float* bk = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

inline void transpose_into(const float* a, std::size_t rows, std::size_t cols, float* t) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile)
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t i1 = std::min(i0 + kTile, rows);
      const std::size_t j1 = std::min(j0 + kTile, cols);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) t[j * rows + i] = a[i * cols + j];
    }
}

inline std::vector<float> transposed(const float* a, std::size_t rows, std::size_t cols) {
  std::vector<float> t(rows * cols);
  transpose_into(a, rows, cols, t.data());
  return t;
}

// Reusable per-thread scratch for the convolution buffers; the column matrix
// alone is tens of MB at the early stages and reallocating it per call costs
// more than the matmul it feeds.
inline std::vector<float>& conv_scratch(std::size_t which, std::size_t size) {
  thread_local std::vector<float> buffers[4];
  auto& buf = buffers[which];
  if (buf.size() < size) buf.resize(size);
  return buf;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation (no kernel flip) with zero padding.
// input [N,Cin,H,W], weight [Cout,Cin,kh,kw], optional bias [Cout].
// ---------------------------------------------------------------------------

struct ConvDims {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo, kdim, patch;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, std::size_t stride,
                          std::size_t pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  ConvDims d{};
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  if (w.dim(1) != d.cin)
    throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                     " input channels, input has " + std::to_string(d.cin));
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  d.kdim = d.cin * d.kh * d.kw;
  d.patch = d.ho * d.wo;
  return d;
}

// Writes one sample's patches into its slice of the shared [kdim, row_stride]
// column buffer; `col` already points at the sample's first column.
inline void im2col(const float* x, const ConvDims& d, std::size_t stride, std::size_t pad,
                   float* col, std::size_t row_stride) {
  const std::ptrdiff_t ih_max = static_cast<std::ptrdiff_t>(d.h);
  const std::ptrdiff_t iw_max = static_cast<std::ptrdiff_t>(d.w);
  for (std::size_t c = 0; c < d.cin; ++c) {
    const float* plane = x + c * d.h * d.w;
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        float* row = col + ((c * d.kh + ki) * d.kw + kj) * row_stride;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          float* out = row + oy * d.wo;
          if (iy < 0 || iy >= ih_max) {
            std::fill(out, out + d.wo, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * d.w;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            out[ox] = (ix < 0 || ix >= iw_max) ? 0.0f : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

inline void col2im_add(const float* col, const ConvDims& d, std::size_t stride, std::size_t pad,
                       float* x, std::size_t row_stride) {
  const std::ptrdiff_t ih_max = static_cast<std::ptrdiff_t>(d.h);
  const std::ptrdiff_t iw_max = static_cast<std::ptrdiff_t>(d.w);
  for (std::size_t c = 0; c < d.cin; ++c) {
    float* plane = x + c * d.h * d.w;
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        const float* row = col + ((c * d.kh + ki) * d.kw + kj) * row_stride;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= ih_max) continue;
          float* dst = plane + static_cast<std::size_t>(iy) * d.w;
          const float* src = row + oy * d.wo;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= iw_max) continue;
            dst[static_cast<std::size_t>(ix)] += src[ox];
          }
        }
      }
    }
  }
}

// The whole batch shares one column buffer, [kdim, n*patch] with column
// index s*patch + p, so every matmul has a wide inner dimension even at the
// deepest stages where a single sample yields only a handful of positions.
// All im2col writes are per-sample slices of that buffer.
inline Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor* bias,
                             std::size_t stride, std::size_t pad) {
  const ConvDims d = conv_dims(x, weight, stride, pad);
  if (bias && bias->size() != d.cout)
    throw ShapeError("conv2d: bias size " + std::to_string(bias->size()) +
                     " does not match " + std::to_string(d.cout) + " output channels");
  const std::size_t cols = d.n * d.patch;
  auto& col = conv_scratch(0, d.kdim * cols);
  for (std::size_t s = 0; s < d.n; ++s)
    im2col(x.data() + s * d.cin * d.h * d.w, d, stride, pad, col.data() + s * d.patch, cols);
  auto& out = conv_scratch(1, d.cout * cols);
  matmul(weight.data(), col.data(), out.data(), d.cout, d.kdim, cols);

  Tensor y({d.n, d.cout, d.ho, d.wo});
  for (std::size_t s = 0; s < d.n; ++s)
    for (std::size_t co = 0; co < d.cout; ++co) {
      const float* src = out.data() + co * cols + s * d.patch;
      float* dst = y.data() + (s * d.cout + co) * d.patch;
      const float b = bias ? (*bias)[co] : 0.0f;
      for (std::size_t i = 0; i < d.patch; ++i) dst[i] = src[i] + b;
    }
  return y;
}

struct ConvGrads {
  Tensor d_input, d_weight, d_bias;
};

inline ConvGrads conv2d_backward(const Tensor& x, const Tensor& weight, bool has_bias,
                                 std::size_t stride, std::size_t pad, const Tensor& dy,
                                 bool need_input_grad = true) {
  const ConvDims d = conv_dims(x, weight, stride, pad);
  require_shape(dy, {d.n, d.cout, d.ho, d.wo}, "conv2d upstream gradient");

  ConvGrads g;
  g.d_weight = Tensor(weight.shape());
  if (has_bias) g.d_bias = Tensor({d.cout});

  const std::size_t cols = d.n * d.patch;
  auto& col = conv_scratch(0, d.kdim * cols);
  for (std::size_t s = 0; s < d.n; ++s)
    im2col(x.data() + s * d.cin * d.h * d.w, d, stride, pad, col.data() + s * d.patch, cols);

  // dy transposed into [cols, cout]; its column-layout gather falls out of
  // the transpose for free since dy rows are (sample, channel) slices.
  auto& dyt = conv_scratch(1, cols * d.cout);
  for (std::size_t s = 0; s < d.n; ++s)
    for (std::size_t co = 0; co < d.cout; ++co) {
      const float* src = dy.data() + (s * d.cout + co) * d.patch;
      float* dst = dyt.data() + s * d.patch * d.cout + co;
      for (std::size_t p = 0; p < d.patch; ++p) dst[p * d.cout] = src[p];
    }

  if (has_bias)
    for (std::size_t co = 0; co < d.cout; ++co) {
      double acc = 0.0;
      for (std::size_t s = 0; s < d.n; ++s) {
        const float* p = dy.data() + (s * d.cout + co) * d.patch;
        for (std::size_t i = 0; i < d.patch; ++i) acc += p[i];
      }
      g.d_bias[co] = static_cast<float>(acc);
    }

  // dW^T = col * dy^T, then a cheap [kdim, cout] transpose.
  auto& dwt = conv_scratch(2, d.kdim * d.cout);
  matmul(col.data(), dyt.data(), dwt.data(), d.kdim, cols, d.cout);
  transpose_into(dwt.data(), d.kdim, d.cout, g.d_weight.data());

  if (need_input_grad) {
    // dX = col2im(W^T * dY); rebuild dY in column layout from dy^T.
    g.d_input = Tensor(x.shape());
    auto& dy_all = conv_scratch(3, d.cout * cols);
    transpose_into(dyt.data(), cols, d.cout, dy_all.data());
    const std::vector<float> wt = transposed(weight.data(), d.cout, d.kdim);
    auto& dcol = conv_scratch(1, d.kdim * cols);  // dyt no longer needed
    matmul(wt.data(), dy_all.data(), dcol.data(), d.kdim, d.cout, cols);
    for (std::size_t s = 0; s < d.n; ++s)
      col2im_add(dcol.data() + s * d.patch, d, stride, pad,
                 g.d_input.data() + s * d.cin * d.h * d.w, cols);
  }
  return g;
}

// ---------------------------------------------------------------------------
// batchnorm2d over [N,C,H,W], normalizing each channel across N*H*W.
// ---------------------------------------------------------------------------

struct BatchNormParams {
  Tensor gamma, beta;
  Tensor running_mean, running_var;  // empty until initialized
  float momentum = 0.1f;
  float eps = 1e-5f;

  explicit BatchNormParams(std::size_t channels = 0) {
    if (channels) {
      gamma = Tensor({channels}, 1.0f);
      beta = Tensor({channels}, 0.0f);
      running_mean = Tensor({channels}, 0.0f);
      running_var = Tensor({channels}, 1.0f);
    }
  }

  std::size_t channels() const { return gamma.size(); }
};

namespace detail {

struct ChannelMoments {
  std::vector<double> mean, var;  // biased variance
};

inline ChannelMoments batch_moments(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t m = n * plane;
  ChannelMoments mo{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = x.data() + (s * c + ch) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      mo.mean[ch] += acc;
    }
  for (std::size_t ch = 0; ch < c; ++ch) mo.mean[ch] /= static_cast<double>(m);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = x.data() + (s * c + ch) * plane;
      const double mu = mo.mean[ch];
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double dlt = p[i] - mu;
        acc += dlt * dlt;
      }
      mo.var[ch] += acc;
    }
  for (std::size_t ch = 0; ch < c; ++ch) mo.var[ch] /= static_cast<double>(m);
  return mo;
}

} // namespace detail

inline Tensor batchnorm2d_forward(const Tensor& x, BatchNormParams& p, bool training) {
  require_rank(x, 4, "batchnorm2d input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (p.channels() != c)
    throw ShapeError("batchnorm2d: params have " + std::to_string(p.channels()) +
                     " channels, input has " + std::to_string(c));
  Tensor y(x.shape());
  if (training) {
    if (n * plane < 2) throw ShapeError("batchnorm2d: training mode needs N*H*W >= 2");
    const auto mo = detail::batch_moments(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double inv_std = 1.0 / std::sqrt(mo.var[ch] + p.eps);
      const double mu = mo.mean[ch];
      const double gm = p.gamma[ch], bt = p.beta[ch];
      for (std::size_t s = 0; s < n; ++s) {
        const float* xi = x.data() + (s * c + ch) * plane;
        float* yi = y.data() + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i)
          yi[i] = static_cast<float>(gm * ((xi[i] - mu) * inv_std) + bt);
      }
      p.running_mean[ch] = static_cast<float>((1.0 - p.momentum) * p.running_mean[ch] +
                                              p.momentum * mo.mean[ch]);
      p.running_var[ch] = static_cast<float>((1.0 - p.momentum) * p.running_var[ch] +
                                             p.momentum * mo.var[ch]);
    }
  } else {
    if (p.running_mean.empty() || p.running_var.empty())
      throw ValueError("batchnorm2d: eval mode with uninitialized running stats");
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (!(p.running_var[ch] > 0.0f))
        throw ValueError("batchnorm2d: running variance must be strictly positive");
      const double inv_std = 1.0 / std::sqrt(static_cast<double>(p.running_var[ch]) + p.eps);
      const double mu = p.running_mean[ch];
      const double gm = p.gamma[ch], bt = p.beta[ch];
      for (std::size_t s = 0; s < n; ++s) {
        const float* xi = x.data() + (s * c + ch) * plane;
        float* yi = y.data() + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i)
          yi[i] = static_cast<float>(gm * ((xi[i] - mu) * inv_std) + bt);
      }
    }
  }
  return y;
}

struct BatchNormGrads {
  Tensor d_input, d_gamma, d_beta;
};

// Training-mode gradient; batch moments are recomputed from the input.
inline BatchNormGrads batchnorm2d_backward(const Tensor& x, const BatchNormParams& p,
                                           const Tensor& dy) {
  require_rank(x, 4, "batchnorm2d input");
  require_shape(dy, x.shape(), "batchnorm2d upstream gradient");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n * plane);
  const auto mo = detail::batch_moments(x);

  BatchNormGrads g{Tensor(x.shape()), Tensor({c}), Tensor({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mu = mo.mean[ch];
    const double inv_std = 1.0 / std::sqrt(mo.var[ch] + p.eps);
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const float* xi = x.data() + (s * c + ch) * plane;
      const float* gi = dy.data() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += gi[i];
        sum_dy_xhat += gi[i] * ((xi[i] - mu) * inv_std);
      }
    }
    g.d_gamma[ch] = static_cast<float>(sum_dy_xhat);
    g.d_beta[ch] = static_cast<float>(sum_dy);
    const double gm = p.gamma[ch];
    const double k = gm * inv_std / m;
    for (std::size_t s = 0; s < n; ++s) {
      const float* xi = x.data() + (s * c + ch) * plane;
      const float* gi = dy.data() + (s * c + ch) * plane;
      float* di = g.d_input.data() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xhat = (xi[i] - mu) * inv_std;
        di[i] = static_cast<float>(k * (m * gi[i] - sum_dy - xhat * sum_dy_xhat));
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

inline Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] < 0.0f) y[i] = 0.0f;
  return y;
}

// Derivative at exactly 0 is 0.
inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  require_shape(dy, x.shape(), "relu upstream gradient");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0f ? dy[i] : 0.0f;
  return dx;
}

// ---------------------------------------------------------------------------
// maxpool2d with -inf padding; ties route the gradient to the first
// (row-major) argmax so backward is deterministic.
// ---------------------------------------------------------------------------

struct PoolDims {
  std::size_t n, c, h, w, ho, wo;
};

inline PoolDims pool_dims(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "maxpool2d input");
  if (k < 1 || stride < 1) throw ShapeError("maxpool2d: kernel and stride must be >= 1");
  if (pad >= k) throw ShapeError("maxpool2d: padding must be smaller than the kernel");
  PoolDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), 0, 0};
  if (d.h + 2 * pad < k || d.w + 2 * pad < k)
    throw ShapeError("maxpool2d: kernel larger than padded input");
  d.ho = (d.h + 2 * pad - k) / stride + 1;
  d.wo = (d.w + 2 * pad - k) / stride + 1;
  return d;
}

inline Tensor maxpool2d_forward(const Tensor& x, std::size_t k, std::size_t stride,
                                std::size_t pad) {
  const PoolDims d = pool_dims(x, k, stride, pad);
  Tensor y({d.n, d.c, d.ho, d.wo});
  for (std::size_t s = 0; s < d.n; ++s)
    for (std::size_t ch = 0; ch < d.c; ++ch) {
      const float* plane = x.data() + (s * d.c + ch) * d.h * d.w;
      float* out = y.data() + (s * d.c + ch) * d.ho * d.wo;
      for (std::size_t oy = 0; oy < d.ho; ++oy)
        for (std::size_t ox = 0; ox < d.wo; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          for (std::size_t ki = 0; ki < k; ++ki) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t kj = 0; kj < k; ++kj) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              const float v = plane[static_cast<std::size_t>(iy) * d.w +
                                    static_cast<std::size_t>(ix)];
              if (v > best) best = v;
            }
          }
          out[oy * d.wo + ox] = best;
        }
    }
  return y;
}

inline Tensor maxpool2d_backward(const Tensor& x, std::size_t k, std::size_t stride,
                                 std::size_t pad, const Tensor& dy) {
  const PoolDims d = pool_dims(x, k, stride, pad);
  require_shape(dy, {d.n, d.c, d.ho, d.wo}, "maxpool2d upstream gradient");
  Tensor dx(x.shape());
  for (std::size_t s = 0; s < d.n; ++s)
    for (std::size_t ch = 0; ch < d.c; ++ch) {
      const float* plane = x.data() + (s * d.c + ch) * d.h * d.w;
      float* dplane = dx.data() + (s * d.c + ch) * d.h * d.w;
      const float* g = dy.data() + (s * d.c + ch) * d.ho * d.wo;
      for (std::size_t oy = 0; oy < d.ho; ++oy)
        for (std::size_t ox = 0; ox < d.wo; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_idx = 0;
          bool found = false;
          for (std::size_t ki = 0; ki < k; ++ki) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            for (std::size_t kj = 0; kj < k; ++kj) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              const std::size_t idx =
                  static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix);
              if (!found || plane[idx] > best) {
                best = plane[idx];
                best_idx = idx;
                found = true;
              }
            }
          }
          if (found) dplane[best_idx] += g[oy * d.wo + ox];
        }
    }
  return dx;
}

// ---------------------------------------------------------------------------
// global average pool: [N,C,H,W] -> [N,C]
// ---------------------------------------------------------------------------

inline Tensor global_avgpool_forward(const Tensor& x) {
  require_rank(x, 4, "global_avgpool input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* p = x.data() + (s * c + ch) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      y.at2(s, ch) = static_cast<float>(acc / static_cast<double>(plane));
    }
  return y;
}

inline Tensor global_avgpool_backward(const Tensor& x, const Tensor& dy) {
  require_rank(x, 4, "global_avgpool input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  require_shape(dy, {n, c}, "global_avgpool upstream gradient");
  Tensor dx(x.shape());
  const float inv = 1.0f / static_cast<float>(plane);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float g = dy.at2(s, ch) * inv;
      float* p = dx.data() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = g;
    }
  return dx;
}

// ---------------------------------------------------------------------------
// linear: y = x * W^T + b, x [N,D], W [K,D], b [K]
// ---------------------------------------------------------------------------

inline Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t n = x.dim(0), d = x.dim(1), k = weight.dim(0);
  if (weight.dim(1) != d)
    throw ShapeError("linear: weight expects " + std::to_string(weight.dim(1)) +
                     " features, input has " + std::to_string(d));
  if (bias.size() != k) throw ShapeError("linear: bias size does not match output width");
  Tensor y({n, k});
  const std::vector<float> wt = transposed(weight.data(), k, d);
  matmul(x.data(), wt.data(), y.data(), n, d, k);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < k; ++j) y.at2(s, j) += bias[j];
  return y;
}

struct LinearGrads {
  Tensor d_input, d_weight, d_bias;
};

inline LinearGrads linear_backward(const Tensor& x, const Tensor& weight, const Tensor& dy) {
  const std::size_t n = x.dim(0), d = x.dim(1), k = weight.dim(0);
  require_shape(dy, {n, k}, "linear upstream gradient");
  LinearGrads g{Tensor({n, d}), Tensor({k, d}), Tensor({k})};
  // dX = dY * W
  matmul(dy.data(), weight.data(), g.d_input.data(), n, k, d);
  // dW = dY^T * X
  const std::vector<float> dyt = transposed(dy.data(), n, k);
  matmul(dyt.data(), x.data(), g.d_weight.data(), k, n, d);
  for (std::size_t j = 0; j < k; ++j) {
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) acc += dy.at2(s, j);
    g.d_bias[j] = static_cast<float>(acc);
  }
  return g;
}

// ---------------------------------------------------------------------------
// softmax + cross-entropy over [N,K] logits with integer labels.
// ---------------------------------------------------------------------------

struct SoftmaxXent {
  double loss;
  Tensor probs;
};

inline SoftmaxXent softmax_xent_forward(const Tensor& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "softmax input");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  SoftmaxXent out{0.0, Tensor({n, k})};
  double loss_acc = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const int label = labels[s];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw ValueError("softmax_xent: label " + std::to_string(label) + " out of range [0," +
                       std::to_string(k) + ") at row " + std::to_string(s));
    const float* row = logits.data() + s * k;
    float mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    float* prow = out.probs.data() + s * k;
    for (std::size_t j = 0; j < k; ++j)
      prow[j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / denom);
    loss_acc -= static_cast<double>(row[label] - mx) - std::log(denom);
  }
  out.loss = loss_acc / static_cast<double>(n);
  return out;
}

// Gradient of the mean loss with respect to the logits: (probs - onehot) / N.
inline Tensor softmax_xent_backward(const Tensor& probs, const std::vector<int>& labels) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  Tensor dlogits = probs;
  const float inv_n = 1.0f / static_cast<float>(n);
  for (std::size_t s = 0; s < n; ++s) {
    float* row = dlogits.data() + s * k;
    row[static_cast<std::size_t>(labels[s])] -= 1.0f;
    for (std::size_t j = 0; j < k; ++j) row[j] *= inv_n;
  }
  return dlogits;
}

// ---------------------------------------------------------------------------
// residual add
// ---------------------------------------------------------------------------

inline Tensor residual_add(const Tensor& block_out, const Tensor& skip) {
  if (!block_out.same_shape(skip))
    throw ShapeError("residual_add: branch shapes differ, " + block_out.shape_str() + " vs " +
                     skip.shape_str());
  Tensor y = block_out;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += skip[i];
  return y;
}

// Backward passes the upstream gradient to both branches unchanged; callers
// just reuse dy, so no function is needed.

} // namespace rsaforge::nn
