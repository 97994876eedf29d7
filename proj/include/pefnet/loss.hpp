#pragma once

#include <string>
#include <vector>

#include "pefnet/autograd.hpp"

namespace pefnet {

/// Settings of the smoothed Jaccard loss.
struct LossConfig {
  /// Smoothing factor; also scales the loss, which therefore lies in [0, alpha).
  double alpha = 1.0;
  /// Average per-image losses instead of pooling the whole batch into one ratio.
  bool per_image = false;

  void validate() const;
};

/// alpha * (1 - (alpha + sum(y * p)) / (alpha + sum(y + p - y * p))).
/// `target` must be binary (within 1e-6); `prob` holds probabilities of the
/// same shape. Differentiable with respect to `prob`.
template <typename T>
Var<T> jaccard_loss(const BasicTensor<T>& target, const Var<T>& prob, const LossConfig& cfg = {});

/// Same value without a tape.
double jaccard_loss_value(const Tensor& target, const Tensor& prob, const LossConfig& cfg = {});

/// |X & Y| / |X | Y|, with 1.0 when both masks are empty.
double iou(const Tensor& a, const Tensor& b);
/// 2 |X & Y| / (|X| + |Y|), with 1.0 when both masks are empty.
double dice(const Tensor& a, const Tensor& b);

struct EvalReport {
  std::vector<std::string> ids;
  std::vector<double> iou;
  std::vector<double> dice;

  void add(std::string id, const Tensor& pred, const Tensor& truth);
  double mean_iou() const;
  double mean_dice() const;
  /// `sample_id,iou,dice` rows plus a trailing `mean` row.
  std::string to_csv() const;
};

}  // namespace pefnet
