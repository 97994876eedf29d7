#pragma once

#include <optional>
#include <type_traits>

#include "pefnet/autograd.hpp"

/// Differentiable tensor operations. Activations are (batch, channel, height, width).
/// Every op records its result on the tape of its first operand and raises
/// ShapeError on incompatible operands.
namespace pefnet::ops {

enum class Mode { Train, Eval };

/// Running statistics owned by a parameter store. `count` is a one-element
/// tensor holding the number of train-mode updates seen (or loaded).
template <typename T>
struct RunningStats {
  BasicTensor<T>& mean;
  BasicTensor<T>& var;
  BasicTensor<T>& count;
};

inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kNormEps = 1e-5;

/// Optional bias operand. Kept out of template argument deduction so callers
/// can pass a Var or std::nullopt directly.
template <typename T>
using OptionalVar = std::type_identity_t<std::optional<Var<T>>>;

/// Cross-correlation (no kernel flip). weight is (co, ci, kh, kw).
/// Output extent is (h + 2p - kh) / s + 1, which must be integral.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, OptionalVar<T> bias, int stride, int padding);

/// Per-channel convolution with stride 1. weight is (c, 1, k, k).
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, OptionalVar<T> bias, int padding);

/// Scatter-add transposed convolution, the adjoint of conv2d with the same
/// stride and zero padding. weight is (ci, co, k, k); output extent is (h - 1) * s + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, OptionalVar<T> bias, int stride);

/// Per-channel normalization over (batch, height, width). Train mode normalizes
/// with batch statistics and folds them into `stats` as
/// running = momentum * running + (1 - momentum) * batch. Eval mode uses `stats`
/// and throws if no statistics were ever accumulated or loaded.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, RunningStats<T> stats, Mode mode,
                  double momentum = kBatchNormMomentum, double eps = kNormEps);

/// Normalization across channels, independently at every (batch, y, x).
template <typename T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = kNormEps);

/// Exact GELU, x * Phi(x).
template <typename T>
Var<T> gelu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

/// Elementwise sum. `b` may also have a leading extent of 1, in which case it
/// is broadcast over the batch.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, double s);

/// x[:, c] * g[c] for a rank-4 x.
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& g);

/// Channels of a followed by channels of b.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// Sum of all elements as a shape-{1} scalar.
template <typename T>
Var<T> sum(const Var<T>& x);

/// Scalar gelu reference, exposed for tests and the mask head.
double gelu_scalar(double x);

}  // namespace pefnet::ops
