#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pefnet/params.hpp"

namespace pefnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over the trainable entries of a ParameterStore.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// One update with learning rate lr. Every trainable parameter needs a
  /// gradient of matching shape; a missing one is reported by name.
  void step(ParameterStore& params, const std::map<std::string, Tensor>& grads, double lr);

  std::uint64_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }

  /// First/second moments as (name, tensor) pairs with names `adam.m.<p>` / `adam.v.<p>`.
  std::vector<std::pair<std::string, Tensor>> export_state() const;
  /// Restores moments and the step counter; unknown names are ignored.
  void import_state(const std::vector<std::pair<std::string, Tensor>>& tensors, std::uint64_t steps);

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<std::string> order_;
  std::map<std::string, Tensor> m_, v_;
};

struct ScheduleConfig {
  double lr_max = 1e-4;
  double eta_min = 0.0;
  std::uint64_t total_steps = 0;
};

/// eta_min + (lr_max - eta_min) * (1 + cos(pi * t / T)) / 2, clamped to eta_min
/// for t > T. A zero-length schedule returns lr_max.
double cosine_lr(std::uint64_t t, const ScheduleConfig& cfg);

}  // namespace pefnet
