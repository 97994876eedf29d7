#include "pefnet/ops.hpp"

#include <cmath>
#include <string>

namespace pefnet::ops {

namespace {

template <typename T>
void require_rank4(const Var<T>& v, const char* op, const char* what) {
  if (v.shape().size() != 4) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank 4, got " + shape_str(v.shape()));
  }
}

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape() != b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
}

template <typename T>
void require_vector(const Var<T>& v, std::size_t n, const char* op, const char* what) {
  if (v.shape().size() != 1 || v.shape()[0] != n) {
    throw ShapeError(std::string(op) + ": " + what + " must have shape (" + std::to_string(n) + "), got " +
                     shape_str(v.shape()));
  }
}

std::string dim_mismatch(const char* op, const char* dim, std::size_t got, std::size_t want) {
  return std::string(op) + ": " + dim + " mismatch, got " + std::to_string(got) + " expected " + std::to_string(want);
}

struct ConvGeom {
  std::size_t n, ci, h, w, co, kh, kw, oh, ow, stride, pad;
  std::size_t K() const { return ci * kh * kw; }
  std::size_t P() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Unfolds one image (ci, h, w) into cols (ci*kh*kw, oh*ow).
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.P();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates cols back into img.
template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* img) {
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.P();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const T* src = row + oy * g.ow;
          T* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, OptionalVar<T> bias, int stride, int padding) {
  constexpr const char* op = "conv2d";
  require_rank4(x, op, "input");
  require_rank4(weight, op, "weight");
  require_same_tape(x, weight, op);
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws[1] != xs[1]) throw ShapeError(dim_mismatch(op, "input channels", xs[1], ws[1]));
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t p = static_cast<std::size_t>(padding);
  auto out_extent = [&](std::size_t in, std::size_t k, const char* dim) {
    if (in + 2 * p < k) throw ShapeError(std::string("conv2d: kernel larger than padded ") + dim);
    const std::size_t span = in + 2 * p - k;
    if (span % s != 0) {
      throw ShapeError(std::string("conv2d: non-integral output ") + dim + " ((" + std::to_string(in) + " + 2*" +
                       std::to_string(p) + " - " + std::to_string(k) + ") / " + std::to_string(s) + ")");
    }
    return span / s + 1;
  };
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, s, p};
  g.oh = out_extent(g.h, g.kh, "height");
  g.ow = out_extent(g.w, g.kw, "width");
  std::vector<Var<T>> inputs{x, weight};
  if (bias) {
    require_same_tape(x, *bias, op);
    require_vector(*bias, g.co, op, "bias");
    inputs.push_back(*bias);
  }

  BasicTensor<T> out({g.n, g.co, g.oh, g.ow});
  const std::size_t K = g.K(), P = g.P();
  std::vector<T> cols(g.pointwise() ? 0 : K * P);
  const T* W = weight.value().raw();
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* img = x.value().raw() + n * g.ci * g.h * g.w;
    const T* C = img;
    if (!g.pointwise()) {
      im2col(img, g, cols.data());
      C = cols.data();
    }
    T* O = out.raw() + n * g.co * P;
    for (std::size_t o = 0; o < g.co; ++o) {
      T* orow = O + o * P;
      const T b0 = bias ? bias->value()[o] : T(0);
      std::fill(orow, orow + P, b0);
      for (std::size_t k = 0; k < K; ++k) {
        const T wv = W[o * K + k];
        const T* crow = C + k * P;
        for (std::size_t q = 0; q < P; ++q) orow[q] += wv * crow[q];
      }
    }
  }

  return x.tape()->record(op, std::move(out), inputs, [x, weight, bias, g](Tape<T>& tape, const BasicTensor<T>& gout) {
    const std::size_t K = g.K(), P = g.P();
    const T* W = weight.value().raw();
    const T* G = gout.raw();
    if (bias && bias->requires_grad()) {
      auto& gb = tape.grad_buffer(*bias);
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.co; ++o) {
          const T* grow = G + (n * g.co + o) * P;
          T acc = 0;
          for (std::size_t q = 0; q < P; ++q) acc += grow[q];
          gb[o] += acc;
        }
    }
    const bool need_w = weight.requires_grad();
    const bool need_x = x.requires_grad();
    std::vector<T> cols(g.pointwise() ? 0 : K * P);
    std::vector<T> dcols(need_x && !g.pointwise() ? K * P : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* img = x.value().raw() + n * g.ci * g.h * g.w;
      const T* Gn = G + n * g.co * P;
      if (need_w) {
        const T* C = img;
        if (!g.pointwise()) {
          im2col(img, g, cols.data());
          C = cols.data();
        }
        auto& gw = tape.grad_buffer(weight);
        T* GW = gw.raw();
        for (std::size_t o = 0; o < g.co; ++o) {
          const T* grow = Gn + o * P;
          for (std::size_t k = 0; k < K; ++k) {
            const T* crow = C + k * P;
            T acc = 0;
            for (std::size_t q = 0; q < P; ++q) acc += grow[q] * crow[q];
            GW[o * K + k] += acc;
          }
        }
      }
      if (need_x) {
        auto& gx = tape.grad_buffer(x);
        T* dimg = gx.raw() + n * g.ci * g.h * g.w;
        T* D = g.pointwise() ? dimg : dcols.data();
        if (!g.pointwise()) std::fill(dcols.begin(), dcols.end(), T(0));
        for (std::size_t o = 0; o < g.co; ++o) {
          const T* grow = Gn + o * P;
          for (std::size_t k = 0; k < K; ++k) {
            const T wv = W[o * K + k];
            T* drow = D + k * P;
            for (std::size_t q = 0; q < P; ++q) drow[q] += wv * grow[q];
          }
        }
        if (!g.pointwise()) col2im(dcols.data(), g, dimg);
      }
    }
  });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, OptionalVar<T> bias, int padding) {
  constexpr const char* op = "depthwise_conv2d";
  require_rank4(x, op, "input");
  require_rank4(weight, op, "weight");
  require_same_tape(x, weight, op);
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws[0] != xs[1]) throw ShapeError(dim_mismatch(op, "weight channels", ws[0], xs[1]));
  if (ws[1] != 1) throw ShapeError(dim_mismatch(op, "weight dim 1", ws[1], 1));
  if (ws[2] != ws[3]) throw ShapeError("depthwise_conv2d: kernel must be square");
  if (padding < 0) throw ShapeError("depthwise_conv2d: padding must be >= 0");
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3], k = ws[2];
  const std::size_t p = static_cast<std::size_t>(padding);
  if (h + 2 * p < k || w + 2 * p < k) throw ShapeError("depthwise_conv2d: kernel larger than padded input");
  const std::size_t oh = h + 2 * p - k + 1, ow = w + 2 * p - k + 1;
  std::vector<Var<T>> inputs{x, weight};
  if (bias) {
    require_same_tape(x, *bias, op);
    require_vector(*bias, c, op, "bias");
    inputs.push_back(*bias);
  }

  // For each tap (ki, kj), output row oy reads input row oy + ki - p over the
  // output columns whose input column is in range.
  struct Range {
    std::size_t lo, hi;
  };
  auto valid = [p](std::size_t kk, std::size_t out, std::size_t in) {
    const long off = static_cast<long>(kk) - static_cast<long>(p);
    const long lo = std::max<long>(0, -off);
    const long hi = std::min<long>(static_cast<long>(out), static_cast<long>(in) - off);
    return Range{static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
  };

  BasicTensor<T> out({n, c, oh, ow});
  const T* X = x.value().raw();
  const T* W = weight.value().raw();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* xin = X + (b * c + ch) * h * w;
      T* o = out.raw() + (b * c + ch) * oh * ow;
      std::fill(o, o + oh * ow, bias ? bias->value()[ch] : T(0));
      for (std::size_t ki = 0; ki < k; ++ki) {
        const Range ry = valid(ki, oh, h);
        for (std::size_t kj = 0; kj < k; ++kj) {
          const Range rx = valid(kj, ow, w);
          const T wv = W[(ch * k + ki) * k + kj];
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const T* src = xin + (oy + ki - p) * w + kj - p;
            T* dst = o + oy * ow;
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) dst[ox] += wv * src[ox];
          }
        }
      }
    }

  return x.tape()->record(op, std::move(out), inputs,
                          [x, weight, bias, n, c, h, w, k, p, oh, ow, valid](Tape<T>& tape, const BasicTensor<T>& gout) {
    const T* G = gout.raw();
    const T* X = x.value().raw();
    const T* W = weight.value().raw();
    if (bias && bias->requires_grad()) {
      auto& gb = tape.grad_buffer(*bias);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* g = G + (b * c + ch) * oh * ow;
          T acc = 0;
          for (std::size_t q = 0; q < oh * ow; ++q) acc += g[q];
          gb[ch] += acc;
        }
    }
    T* GW = weight.requires_grad() ? tape.grad_buffer(weight).raw() : nullptr;
    T* GX = x.requires_grad() ? tape.grad_buffer(x).raw() : nullptr;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* xin = X + (b * c + ch) * h * w;
        const T* g = G + (b * c + ch) * oh * ow;
        T* gx = GX ? GX + (b * c + ch) * h * w : nullptr;
        for (std::size_t ki = 0; ki < k; ++ki) {
          const Range ry = valid(ki, oh, h);
          for (std::size_t kj = 0; kj < k; ++kj) {
            const Range rx = valid(kj, ow, w);
            const T wv = W[(ch * k + ki) * k + kj];
            T acc = 0;
            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
              const std::size_t off = (oy + ki - p) * w + kj - p;
              const T* grow = g + oy * ow;
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                acc += grow[ox] * xin[off + ox];
                if (gx) gx[off + ox] += wv * grow[ox];
              }
            }
            if (GW) GW[(ch * k + ki) * k + kj] += acc;
          }
        }
      }
  });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, OptionalVar<T> bias, int stride) {
  constexpr const char* op = "conv_transpose2d";
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1, got " + std::to_string(stride));
  require_rank4(x, op, "input");
  require_rank4(weight, op, "weight");
  require_same_tape(x, weight, op);
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws[0] != xs[1]) throw ShapeError(dim_mismatch(op, "input channels", xs[1], ws[0]));
  if (ws[2] != ws[3]) throw ShapeError("conv_transpose2d: kernel must be square");
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3], co = ws[1], k = ws[2];
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t oh = (h - 1) * s + k, ow = (w - 1) * s + k;
  std::vector<Var<T>> inputs{x, weight};
  if (bias) {
    require_same_tape(x, *bias, op);
    require_vector(*bias, co, op, "bias");
    inputs.push_back(*bias);
  }

  BasicTensor<T> out({n, co, oh, ow});
  const T* X = x.value().raw();
  const T* W = weight.value().raw();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < co; ++o) {
      T* dst = out.raw() + (b * co + o) * oh * ow;
      if (bias) std::fill(dst, dst + oh * ow, bias->value()[o]);
      for (std::size_t i = 0; i < ci; ++i) {
        const T* src = X + (b * ci + i) * h * w;
        for (std::size_t ki = 0; ki < k; ++ki)
          for (std::size_t kj = 0; kj < k; ++kj) {
            const T wv = W[((i * co + o) * k + ki) * k + kj];
            for (std::size_t y = 0; y < h; ++y) {
              T* drow = dst + (y * s + ki) * ow + kj;
              const T* srow = src + y * w;
              for (std::size_t xx = 0; xx < w; ++xx) drow[xx * s] += wv * srow[xx];
            }
          }
      }
    }
  }

  return x.tape()->record(op, std::move(out), inputs,
                          [x, weight, bias, n, ci, h, w, co, k, s, oh, ow](Tape<T>& tape, const BasicTensor<T>& gout) {
    const T* G = gout.raw();
    const T* X = x.value().raw();
    const T* W = weight.value().raw();
    if (bias && bias->requires_grad()) {
      auto& gb = tape.grad_buffer(*bias);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o) {
          const T* g = G + (b * co + o) * oh * ow;
          T acc = 0;
          for (std::size_t q = 0; q < oh * ow; ++q) acc += g[q];
          gb[o] += acc;
        }
    }
    T* GW = weight.requires_grad() ? tape.grad_buffer(weight).raw() : nullptr;
    T* GX = x.requires_grad() ? tape.grad_buffer(x).raw() : nullptr;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < co; ++o) {
        const T* g = G + (b * co + o) * oh * ow;
        for (std::size_t i = 0; i < ci; ++i) {
          const T* src = X + (b * ci + i) * h * w;
          T* gx = GX ? GX + (b * ci + i) * h * w : nullptr;
          for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
              const std::size_t widx = ((i * co + o) * k + ki) * k + kj;
              const T wv = W[widx];
              T acc = 0;
              for (std::size_t y = 0; y < h; ++y) {
                const T* grow = g + (y * s + ki) * ow + kj;
                const T* srow = src + y * w;
                for (std::size_t xx = 0; xx < w; ++xx) {
                  acc += grow[xx * s] * srow[xx];
                  if (gx) gx[y * w + xx] += wv * grow[xx * s];
                }
              }
              if (GW) GW[widx] += acc;
            }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Normalizations

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, RunningStats<T> stats, Mode mode,
                  double momentum, double eps) {
  constexpr const char* op = "batch_norm";
  require_rank4(x, op, "input");
  require_same_tape(x, gamma, op);
  require_same_tape(x, beta, op);
  const auto& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  const std::size_t count = n * plane;
  require_vector(gamma, c, op, "gamma");
  require_vector(beta, c, op, "beta");
  if (stats.mean.numel() != c || stats.var.numel() != c || stats.count.numel() != 1) {
    throw ShapeError("batch_norm: running statistics do not match " + std::to_string(c) + " channels");
  }

  const T* X = x.value().raw();
  std::vector<T> mean(c), invstd(c);
  if (mode == Mode::Train) {
    if (count < 2) {
      throw ShapeError("batch_norm: train mode needs at least 2 values per channel, got " + std::to_string(count));
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = X + (b * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) s += p[q];
      }
      const double m = s / static_cast<double>(count);
      double v = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = X + (b * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) v += (p[q] - m) * (p[q] - m);
      }
      v /= static_cast<double>(count);
      mean[ch] = static_cast<T>(m);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(v + eps));
      stats.mean[ch] = static_cast<T>(momentum * stats.mean[ch] + (1.0 - momentum) * m);
      stats.var[ch] = static_cast<T>(momentum * stats.var[ch] + (1.0 - momentum) * v);
    }
    stats.count[0] += T(1);
  } else {
    if (!(stats.count[0] > T(0))) {
      throw Error("batch_norm: eval mode requires running statistics (train at least one step or load a checkpoint)");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.mean[ch];
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[ch]) + eps));
    }
  }

  BasicTensor<T> out(xs);
  const T* Gm = gamma.value().raw();
  const T* Bt = beta.value().raw();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = X + (b * c + ch) * plane;
      T* o = out.raw() + (b * c + ch) * plane;
      for (std::size_t q = 0; q < plane; ++q) o[q] = Gm[ch] * ((p[q] - mean[ch]) * invstd[ch]) + Bt[ch];
    }

  const bool train = mode == Mode::Train;
  return x.tape()->record(op, std::move(out), {x, gamma, beta},
                          [x, gamma, beta, mean, invstd, n, c, plane, count, train](Tape<T>& tape,
                                                                                    const BasicTensor<T>& gout) {
    const T* G = gout.raw();
    const T* X = x.value().raw();
    const T* Gm = gamma.value().raw();
    T* GG = gamma.requires_grad() ? tape.grad_buffer(gamma).raw() : nullptr;
    T* GB = beta.requires_grad() ? tape.grad_buffer(beta).raw() : nullptr;
    T* GX = x.requires_grad() ? tape.grad_buffer(x).raw() : nullptr;
    for (std::size_t ch = 0; ch < c; ++ch) {
      T sum_g = 0, sum_gx = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* g = G + (b * c + ch) * plane;
        const T* p = X + (b * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          sum_g += g[q];
          sum_gx += g[q] * (p[q] - mean[ch]) * invstd[ch];
        }
      }
      if (GG) GG[ch] += sum_gx;
      if (GB) GB[ch] += sum_g;
      if (!GX) continue;
      const T scale_ = Gm[ch] * invstd[ch];
      const T inv_count = T(1) / static_cast<T>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const T* g = G + (b * c + ch) * plane;
        const T* p = X + (b * c + ch) * plane;
        T* gx = GX + (b * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          if (train) {
            const T xhat = (p[q] - mean[ch]) * invstd[ch];
            gx[q] += scale_ * (g[q] - inv_count * sum_g - xhat * inv_count * sum_gx);
          } else {
            gx[q] += scale_ * g[q];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  constexpr const char* op = "layer_norm_channels";
  require_rank4(x, op, "input");
  require_same_tape(x, gamma, op);
  require_same_tape(x, beta, op);
  const auto& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  if (c < 1) throw ShapeError("layer_norm_channels: need at least one channel");
  require_vector(gamma, c, op, "gamma");
  require_vector(beta, c, op, "beta");

  const T* X = x.value().raw();
  const T* Gm = gamma.value().raw();
  const T* Bt = beta.value().raw();
  BasicTensor<T> out(xs);
  // Per-location statistics, stored (n, plane).
  std::vector<T> mean(n * plane), invstd(n * plane);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = X + b * c * plane;
    for (std::size_t q = 0; q < plane; ++q) {
      double s = 0;
      for (std::size_t ch = 0; ch < c; ++ch) s += xb[ch * plane + q];
      const double m = s / static_cast<double>(c);
      double v = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = xb[ch * plane + q] - m;
        v += d * d;
      }
      v /= static_cast<double>(c);
      mean[b * plane + q] = static_cast<T>(m);
      invstd[b * plane + q] = static_cast<T>(1.0 / std::sqrt(v + eps));
    }
    T* ob = out.raw() + b * c * plane;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < plane; ++q) {
        const T xhat = (xb[ch * plane + q] - mean[b * plane + q]) * invstd[b * plane + q];
        ob[ch * plane + q] = Gm[ch] * xhat + Bt[ch];
      }
  }

  return x.tape()->record(op, std::move(out), {x, gamma, beta},
                          [x, gamma, beta, mean, invstd, n, c, plane](Tape<T>& tape, const BasicTensor<T>& gout) {
    const T* G = gout.raw();
    const T* X = x.value().raw();
    const T* Gm = gamma.value().raw();
    T* GG = gamma.requires_grad() ? tape.grad_buffer(gamma).raw() : nullptr;
    T* GB = beta.requires_grad() ? tape.grad_buffer(beta).raw() : nullptr;
    T* GX = x.requires_grad() ? tape.grad_buffer(x).raw() : nullptr;
    const T inv_c = T(1) / static_cast<T>(c);
    for (std::size_t b = 0; b < n; ++b) {
      const T* xb = X + b * c * plane;
      const T* gb = G + b * c * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        const T m = mean[b * plane + q], is = invstd[b * plane + q];
        T sum_d = 0, sum_dx = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T xhat = (xb[ch * plane + q] - m) * is;
          const T g = gb[ch * plane + q];
          if (GG) GG[ch] += g * xhat;
          if (GB) GB[ch] += g;
          const T d = g * Gm[ch];
          sum_d += d;
          sum_dx += d * xhat;
        }
        if (!GX) continue;
        T* gx = GX + b * c * plane;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T xhat = (xb[ch * plane + q] - m) * is;
          const T d = gb[ch * plane + q] * Gm[ch];
          gx[ch * plane + q] += is * (d - inv_c * sum_d - xhat * inv_c * sum_dx);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Pointwise

template <typename T>
Var<T> gelu(const Var<T>& x) {
  BasicTensor<T> out(x.shape());
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<T>(gelu_scalar(static_cast<double>(in[i])));
  return x.tape()->record("gelu", std::move(out), {x}, [x](Tape<T>& tape, const BasicTensor<T>& gout) {
    const auto in = x.value().data();
    BasicTensor<T> gx(x.shape());
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double v = in[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      gx[i] = static_cast<T>(gout[i] * (cdf + v * pdf));
    }
    tape.accumulate(x, gx);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  BasicTensor<T> out(x.shape());
  const auto in = x.value().data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    if (v >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  BasicTensor<T> saved = out;
  return x.tape()->record("sigmoid", std::move(out), {x},
                          [x, s = std::move(saved)](Tape<T>& tape, const BasicTensor<T>& gout) {
    BasicTensor<T> gx(x.shape());
    for (std::size_t i = 0; i < s.numel(); ++i) gx[i] = gout[i] * s[i] * (T(1) - s[i]);
    tape.accumulate(x, gx);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "add");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  bool broadcast = false;
  if (as != bs) {
    broadcast = as.size() == bs.size() && bs[0] == 1 && std::equal(as.begin() + 1, as.end(), bs.begin() + 1);
    if (!broadcast) throw ShapeError("add: shape mismatch " + shape_str(as) + " vs " + shape_str(bs));
  }
  const std::size_t inner = b.value().numel();
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i % inner];
  return a.tape()->record("add", std::move(out), {a, b}, [a, b, inner](Tape<T>& tape, const BasicTensor<T>& gout) {
    tape.accumulate(a, gout);
    if (!b.requires_grad()) return;
    BasicTensor<T> gb(b.shape());
    for (std::size_t i = 0; i < gout.numel(); ++i) gb[i % inner] += gout[i];
    tape.accumulate(b, gb);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return a.tape()->record("mul", std::move(out), {a, b}, [a, b](Tape<T>& tape, const BasicTensor<T>& gout) {
    BasicTensor<T> g(a.shape());
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gout[i] * b.value()[i];
      tape.accumulate(a, g);
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] = gout[i] * a.value()[i];
      tape.accumulate(b, g);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = static_cast<T>(v * s);
  return a.tape()->record("scale", std::move(out), {a}, [a, s](Tape<T>& tape, const BasicTensor<T>& gout) {
    BasicTensor<T> g = gout;
    for (auto& v : g.data()) v = static_cast<T>(v * s);
    tape.accumulate(a, g);
  });
}

template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& g) {
  require_rank4(x, "channel_scale", "input");
  require_same_tape(x, g, "channel_scale");
  const auto& xs = x.shape();
  const std::size_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  require_vector(g, c, "channel_scale", "scale");
  BasicTensor<T> out = x.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* o = out.raw() + (b * c + ch) * plane;
      for (std::size_t q = 0; q < plane; ++q) o[q] *= g.value()[ch];
    }
  return x.tape()->record("channel_scale", std::move(out), {x, g},
                          [x, g, n, c, plane](Tape<T>& tape, const BasicTensor<T>& gout) {
    if (x.requires_grad()) {
      T* gx = tape.grad_buffer(x).raw();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t q = 0; q < plane; ++q) {
            const std::size_t i = (b * c + ch) * plane + q;
            gx[i] += gout[i] * g.value()[ch];
          }
    }
    if (g.requires_grad()) {
      T* gg = tape.grad_buffer(g).raw();
      const T* X = x.value().raw();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          T acc = 0;
          for (std::size_t q = 0; q < plane; ++q) {
            const std::size_t i = (b * c + ch) * plane + q;
            acc += gout[i] * X[i];
          }
          gg[ch] += acc;
        }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank4(a, "concat_channels", "first input");
  require_rank4(b, "concat_channels", "second input");
  require_same_tape(a, b, "concat_channels");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0]) throw ShapeError(dim_mismatch("concat_channels", "batch", bs[0], as[0]));
  if (as[2] != bs[2]) throw ShapeError(dim_mismatch("concat_channels", "height", bs[2], as[2]));
  if (as[3] != bs[3]) throw ShapeError(dim_mismatch("concat_channels", "width", bs[3], as[3]));
  const std::size_t n = as[0], ca = as[1], cb = bs[1], plane = as[2] * as[3];
  BasicTensor<T> out({n, ca + cb, as[2], as[3]});
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.value().raw() + s * ca * plane, ca * plane, out.raw() + s * (ca + cb) * plane);
    std::copy_n(b.value().raw() + s * cb * plane, cb * plane, out.raw() + (s * (ca + cb) + ca) * plane);
  }
  return a.tape()->record("concat_channels", std::move(out), {a, b},
                          [a, b, n, ca, cb, plane](Tape<T>& tape, const BasicTensor<T>& gout) {
    if (a.requires_grad()) {
      T* ga = tape.grad_buffer(a).raw();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < ca * plane; ++i) ga[s * ca * plane + i] += gout[s * (ca + cb) * plane + i];
    }
    if (b.requires_grad()) {
      T* gb = tape.grad_buffer(b).raw();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < cb * plane; ++i)
          gb[s * cb * plane + i] += gout[(s * (ca + cb) + ca) * plane + i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  return x.tape()->record("sum", BasicTensor<T>::scalar(acc), {x}, [x](Tape<T>& tape, const BasicTensor<T>& gout) {
    tape.accumulate(x, BasicTensor<T>(x.shape(), gout[0]));
  });
}

#define PEFNET_INSTANTIATE_OPS(T)                                                                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, OptionalVar<T>, int, int);                    \
  template Var<T> depthwise_conv2d(const Var<T>&, const Var<T>&, OptionalVar<T>, int);               \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, OptionalVar<T>, int);               \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, RunningStats<T>, Mode, double,    \
                             double);                                                                       \
  template Var<T> layer_norm_channels(const Var<T>&, const Var<T>&, const Var<T>&, double);                 \
  template Var<T> gelu(const Var<T>&);                                                                      \
  template Var<T> sigmoid(const Var<T>&);                                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> scale(const Var<T>&, double);                                                             \
  template Var<T> channel_scale(const Var<T>&, const Var<T>&);                                              \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                            \
  template Var<T> sum(const Var<T>&);

PEFNET_INSTANTIATE_OPS(float)
PEFNET_INSTANTIATE_OPS(double)

}  // namespace pefnet::ops
