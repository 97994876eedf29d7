#include "pefnet/optim.hpp"

#include <cmath>
#include <numbers>

namespace pefnet {

void Adam::step(ParameterStore& params, const std::map<std::string, Tensor>& grads, double lr) {
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    auto it = grads.find(e.name);
    if (it == grads.end()) throw Error("adam: missing gradient for parameter " + e.name);
    if (it->second.shape() != e.value.shape()) {
      throw ShapeError("adam: gradient shape " + shape_str(it->second.shape()) + " does not match parameter " + e.name);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Tensor& g = grads.at(e.name);
    auto [mit, fresh] = m_.try_emplace(e.name, Tensor::zeros(e.value.shape()));
    if (fresh) {
      order_.push_back(e.name);
      v_.emplace(e.name, Tensor::zeros(e.value.shape()));
    }
    Tensor& m = mit->second;
    Tensor& v = v_.at(e.name);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double gi = g[i];
      const double mi = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      const double vi = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + config_.eps);
      e.value[i] = static_cast<float>(e.value[i] - update);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> Adam::export_state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& name : order_) {
    out.emplace_back("adam.m." + name, m_.at(name));
    out.emplace_back("adam.v." + name, v_.at(name));
  }
  return out;
}

void Adam::import_state(const std::vector<std::pair<std::string, Tensor>>& tensors, std::uint64_t steps) {
  m_.clear();
  v_.clear();
  order_.clear();
  for (const auto& [name, t] : tensors) {
    if (name.rfind("adam.m.", 0) == 0) {
      const auto p = name.substr(7);
      order_.push_back(p);
      m_[p] = t;
    } else if (name.rfind("adam.v.", 0) == 0) {
      v_[name.substr(7)] = t;
    }
  }
  for (const auto& p : order_) {
    if (!v_.count(p)) throw DataError("adam state: missing second moment for " + p);
  }
  t_ = steps;
}

double cosine_lr(std::uint64_t t, const ScheduleConfig& cfg) {
  if (cfg.total_steps == 0) return cfg.lr_max;
  if (t >= cfg.total_steps) return cfg.eta_min;
  const double frac = static_cast<double>(t) / static_cast<double>(cfg.total_steps);
  return cfg.eta_min + 0.5 * (cfg.lr_max - cfg.eta_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace pefnet
