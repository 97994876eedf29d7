#include "pefnet/loss.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace pefnet {

namespace {

struct Overlap {
  std::size_t inter = 0, a = 0, b = 0;
};

bool is_binary(double v) { return std::abs(v) <= 1e-6 || std::abs(v - 1.0) <= 1e-6; }

Overlap count_overlap(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mask shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Overlap o;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (!is_binary(a[i]) || !is_binary(b[i])) throw DataError("mask values must be 0 or 1");
    const bool x = a[i] > 0.5f, y = b[i] > 0.5f;
    o.a += x;
    o.b += y;
    o.inter += x && y;
  }
  return o;
}

// Loss of one group of elements and its gradient with respect to prob.
template <typename T>
double group_loss(const T* y, const T* p, std::size_t n, double alpha, T* grad, double grad_scale) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    inter += static_cast<double>(y[i]) * p[i];
    uni += static_cast<double>(y[i]) + p[i] - static_cast<double>(y[i]) * p[i];
  }
  const double den = alpha + uni;
  if (grad) {
    for (std::size_t i = 0; i < n; ++i) {
      const double yi = y[i];
      grad[i] = static_cast<T>(grad_scale * -alpha * (yi * den - (alpha + inter) * (1.0 - yi)) / (den * den));
    }
  }
  return alpha * (1.0 - (alpha + inter) / den);
}

template <typename T>
void check_loss_inputs(const BasicTensor<T>& target, const BasicTensor<T>& prob, const LossConfig& cfg) {
  cfg.validate();
  if (target.shape() != prob.shape()) {
    throw ShapeError("jaccard_loss: target shape " + shape_str(target.shape()) + " does not match prediction " +
                     shape_str(prob.shape()));
  }
  for (T v : target.data()) {
    if (!is_binary(static_cast<double>(v))) throw DataError("jaccard_loss: target must be binary");
  }
}

template <typename T>
double loss_and_grad(const BasicTensor<T>& target, const BasicTensor<T>& prob, const LossConfig& cfg, T* grad,
                     double upstream) {
  const std::size_t groups = cfg.per_image ? target.dim(0) : 1;
  const std::size_t n = target.numel() / groups;
  double total = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    total += group_loss(target.raw() + g * n, prob.raw() + g * n, n, cfg.alpha, grad ? grad + g * n : nullptr,
                        upstream / static_cast<double>(groups));
  }
  return total / static_cast<double>(groups);
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw Error("loss alpha must be finite and positive");
}

template <typename T>
Var<T> jaccard_loss(const BasicTensor<T>& target, const Var<T>& prob, const LossConfig& cfg) {
  check_loss_inputs(target, prob.value(), cfg);
  const double value = loss_and_grad<T>(target, prob.value(), cfg, nullptr, 1.0);
  return prob.tape()->record("jaccard_loss", BasicTensor<T>::scalar(static_cast<T>(value)), {prob},
                             [prob, target, cfg](Tape<T>& tape, const BasicTensor<T>& gout) {
    BasicTensor<T> g(prob.shape());
    loss_and_grad<T>(target, prob.value(), cfg, g.raw(), static_cast<double>(gout[0]));
    tape.accumulate(prob, g);
  });
}

double jaccard_loss_value(const Tensor& target, const Tensor& prob, const LossConfig& cfg) {
  check_loss_inputs(target, prob, cfg);
  return loss_and_grad<float>(target, prob, cfg, nullptr, 1.0);
}

double iou(const Tensor& a, const Tensor& b) {
  const auto o = count_overlap(a, b);
  const std::size_t uni = o.a + o.b - o.inter;
  return uni == 0 ? 1.0 : static_cast<double>(o.inter) / static_cast<double>(uni);
}

double dice(const Tensor& a, const Tensor& b) {
  const auto o = count_overlap(a, b);
  const std::size_t total = o.a + o.b;
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(o.inter) / static_cast<double>(total);
}

void EvalReport::add(std::string id, const Tensor& pred, const Tensor& truth) {
  ids.push_back(std::move(id));
  iou.push_back(pefnet::iou(pred, truth));
  dice.push_back(pefnet::dice(pred, truth));
}

double EvalReport::mean_iou() const {
  return iou.empty() ? 0.0 : std::accumulate(iou.begin(), iou.end(), 0.0) / static_cast<double>(iou.size());
}

double EvalReport::mean_dice() const {
  return dice.empty() ? 0.0 : std::accumulate(dice.begin(), dice.end(), 0.0) / static_cast<double>(dice.size());
}

std::string EvalReport::to_csv() const {
  std::string out = "sample_id,iou,dice\n";
  char buf[96];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", iou[i], dice[i]);
    out += ids[i] + buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f\n", mean_iou(), mean_dice());
  return out + buf;
}

template Var<float> jaccard_loss(const BasicTensor<float>&, const Var<float>&, const LossConfig&);
template Var<double> jaccard_loss(const BasicTensor<double>&, const Var<double>&, const LossConfig&);

}  // namespace pefnet
