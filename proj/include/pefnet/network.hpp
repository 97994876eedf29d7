#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "pefnet/blocks.hpp"
#include "pefnet/keyvalue.hpp"

namespace pefnet {

/// How a decoder feature meets its skip feature.
enum class Fusion {
  Add,     // y = skip + up
  Concat,  // y = conv1x1(concat(skip, up)), restoring the level's width
};

std::string_view to_string(Fusion f);
Fusion parse_fusion(std::string_view s);

struct ModelConfig {
  std::string preset = "toy";
  std::array<std::size_t, 4> depths{1, 1, 1, 1};
  std::array<std::size_t, 4> widths{16, 32, 64, 128};
  std::vector<int> mkcnn_kernels{1, 3, 5, 7};
  Fusion fusion = Fusion::Add;
  double pe_base = 10000.0;
  std::size_t head_channels = 16;
  /// Skip paths go through the MPE block; false feeds the raw encoder tap.
  bool use_mpe = true;
  /// BatchNorm after each transposed conv of the x4 output upsampler.
  bool head_norm = true;

  /// Throws ShapeError when widths are not divisible by 4 or kernels are invalid.
  void validate() const;

  /// toy, tiny, small or base.
  static ModelConfig from_preset(std::string_view name);

  KeyValues to_key_values() const;
  /// Reads `model.*` keys; missing keys keep the toy defaults.
  static ModelConfig from_key_values(const KeyValues& kv);
};

inline constexpr std::size_t kInputChannels = 3;
inline constexpr std::size_t kNetworkStride = 32;

/// Every tensor the network reads, in a stable order.
ParamSpecs model_specs(const ModelConfig& config);

/// Seeded initialization: conv weights truncated-normal (std 0.02), norm
/// gammas 1, betas and biases 0, layer scales 1e-6.
ParameterStore build(const ModelConfig& config, std::uint64_t seed);

/// Logits (b, 1, h, w) for an input (b, 3, h, w) with h, w divisible by 32.
/// The binding's mode selects batch or running statistics in BatchNorm.
template <typename T>
Var<T> forward(Binding<T>& binding, const ModelConfig& config, const Var<T>& x);

/// Eval-mode logits without gradient tracking.
Tensor predict_logits(ParameterStore& store, const ModelConfig& config, const Tensor& x);

/// sigmoid(logits) >= threshold -> 1, else 0. Ties count as foreground.
Tensor threshold_logits(const Tensor& logits, double threshold);
Tensor predict_mask(ParameterStore& store, const ModelConfig& config, const Tensor& x, double threshold = 0.5);

struct ModuleSummary {
  std::string module;
  std::size_t tensors = 0;
  std::size_t parameters = 0;
};

/// Trainable parameter counts grouped by module, computed from shapes alone.
std::vector<ModuleSummary> summarize(const ModelConfig& config);
std::size_t count_parameters(const ModelConfig& config);

}  // namespace pefnet
