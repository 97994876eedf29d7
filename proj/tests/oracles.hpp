#pragma once

// Reference implementations written directly from the definitions, sharing no
// code with the library. Everything is double precision and uses plain loops.

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "pefnet/tensor.hpp"

namespace oracle {

using pefnet::Shape;
using pefnet::Tensor;
using pefnet::Tensor64;

inline Tensor64 random64(const Shape& shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor64 t(shape);
  for (auto& v : t.data()) v = d(gen);
  return t;
}

inline Tensor random32(const Shape& shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  return random64(shape, gen, lo, hi).cast<float>();
}

inline Tensor random_mask(const Shape& shape, std::mt19937_64& gen, double p = 0.5) {
  std::bernoulli_distribution d(p);
  Tensor t(shape);
  for (auto& v : t.data()) v = d(gen) ? 1.0f : 0.0f;
  return t;
}

/// Direct cross-correlation: out[n,o,y,x] = b[o] + sum x[n,i,y*s+ky-p,x*s+kx-p] w[o,i,ky,kx].
inline Tensor64 conv2d(const Tensor64& x, const Tensor64& w, const std::vector<double>& bias, int stride, int pad) {
  const auto n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor64 out({n, co, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - pad;
                const long ix = static_cast<long>(xx * stride + kx) - pad;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x.at(b, i, iy, ix) * w.at(o, i, ky, kx);
              }
          out.at(b, o, y, xx) = acc;
        }
  return out;
}

/// Every input pixel scatters x * w[i, o] into the k x k window at (y*s, x*s).
inline Tensor64 conv_transpose2d(const Tensor64& x, const Tensor64& w, const std::vector<double>& bias, int stride) {
  const auto n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto co = w.dim(1), k = w.dim(2);
  const std::size_t oh = (h - 1) * stride + k, ow = (wd - 1) * stride + k;
  Tensor64 out({n, co, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) out.at(b, o, y, xx) = bias.empty() ? 0.0 : bias[o];
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx)
          for (std::size_t o = 0; o < co; ++o)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx)
                out.at(b, o, y * stride + ky, xx * stride + kx) += x.at(b, i, y, xx) * w.at(i, o, ky, kx);
  return out;
}

/// Phi(x) via erfc, which keeps precision for negative x.
inline double gelu(double x) { return x * 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double dot(const Tensor64& a, const Tensor64& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

struct Counts {
  double inter = 0, a = 0, b = 0;
};

inline Counts count(const Tensor& a, const Tensor& b) {
  Counts c;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    c.inter += (a[i] > 0.5f && b[i] > 0.5f) ? 1 : 0;
    c.a += a[i] > 0.5f ? 1 : 0;
    c.b += b[i] > 0.5f ? 1 : 0;
  }
  return c;
}

inline double iou(const Tensor& a, const Tensor& b) {
  const auto c = count(a, b);
  const double uni = c.a + c.b - c.inter;
  return uni == 0 ? 1.0 : c.inter / uni;
}

inline double dice(const Tensor& a, const Tensor& b) {
  const auto c = count(a, b);
  return c.a + c.b == 0 ? 1.0 : 2 * c.inter / (c.a + c.b);
}

/// alpha * (1 - (alpha + I) / (alpha + U)) with soft I and U.
inline double jaccard(const std::vector<double>& y, const std::vector<double>& p, double alpha) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    inter += y[i] * p[i];
    uni += y[i] + p[i] - y[i] * p[i];
  }
  return alpha * (1 - (alpha + inter) / (alpha + uni));
}

/// Trainable parameters of the network, counted from the layer list by hand:
/// conv weights + biases, norm affine pairs, layer scales.
inline std::size_t network_parameters(const std::vector<std::size_t>& depths, const std::vector<std::size_t>& w,
                                      std::size_t head, const std::vector<int>& kernels, bool mpe, bool concat,
                                      bool head_norm) {
  std::size_t n = 0;
  n += 3 * w[0] * 16 + 2 * w[0];  // stem conv (no bias) + LN
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) n += 2 * w[s - 1] + w[s] * w[s - 1] * 4 + w[s];  // LN + 2x2 conv with bias
    const std::size_t c = w[s];
    const std::size_t block = c * 49 + 2 * c + (4 * c * c + 4 * c) + (c * 4 * c + c) + c;
    n += depths[s] * block;
  }
  for (std::size_t l = 0; l < 3; ++l) {
    if (mpe) {
      for (int k : kernels) n += w[l] * w[l] * static_cast<std::size_t>(k * k);
      n += 2 * w[l];
    }
    n += w[l + 1] * w[l] * 4 + w[l];  // transposed conv
    if (concat) n += w[l] * 2 * w[l] + w[l];
    n += w[l] * w[l] * 9 + 2 * w[l];  // refine conv (no bias) + BN
  }
  n += w[0] * head * 4 + head + head * head * 4 + head + head + 1;
  if (head_norm) n += 4 * head;
  return n;
}

}  // namespace oracle
