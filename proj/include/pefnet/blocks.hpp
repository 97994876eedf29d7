#pragma once

#include <string>
#include <vector>

#include "pefnet/params.hpp"

/// Composite layers of the segmentation network. Each block has a `declare_*`
/// function listing the tensors it reads (names are `prefix.<part>`), and a
/// forward function that pulls them from a Binding.
namespace pefnet::blocks {

inline constexpr std::size_t kConvNeXtExpansion = 4;
inline constexpr int kConvNeXtKernel = 7;
inline constexpr std::size_t kStemStride = 4;

/// Sinusoidal 2-D embedding settings. `base` is the wavelength base of the
/// frequency ladder.
struct PEConfig {
  double base = 10000.0;
};

// ConvNeXt block: x + ls * pw2(gelu(pw1(ln(dw7x7(x))))).
void declare_convnext_block(ParamSpecs& specs, const std::string& prefix, std::size_t c);
template <typename T>
Var<T> convnext_block(Binding<T>& b, const std::string& prefix, const Var<T>& x);

// 4x4 stride-4 patchify conv followed by channel layer norm.
void declare_stem(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c);
template <typename T>
Var<T> stem(Binding<T>& b, const std::string& prefix, const Var<T>& x);

// Channel layer norm followed by a 2x2 stride-2 conv.
void declare_downsample(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c);
template <typename T>
Var<T> downsample(Binding<T>& b, const std::string& prefix, const Var<T>& x);

/// Throws unless `kernels` is non-empty and every size is odd and positive.
void validate_kernel_set(const std::vector<int>& kernels);

/// Multi-kernel conv: sum over k of conv_k(x) with same padding and no bias.
void declare_mkcnn(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c,
                   const std::vector<int>& kernels);
template <typename T>
Var<T> mkcnn(Binding<T>& b, const std::string& prefix, const Var<T>& x, const std::vector<int>& kernels);

/// Deterministic (1, c, h, w) embedding. Channels [0, c/2) encode the row,
/// [c/2, c) the column. Inside each half, channel 2i holds
/// sin(pos / base^(2i / (c/2))) and channel 2i+1 the cosine at the same
/// frequency. Requires c divisible by 4.
template <typename T>
BasicTensor<T> positional_embedding_2d(std::size_t c, std::size_t h, std::size_t w, const PEConfig& cfg = {});

/// Multi-kernel positional embedding block:
/// positional_embedding_2d(co, h, w) + batch_norm(mkcnn(x)).
void declare_mpe(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c,
                 const std::vector<int>& kernels);
template <typename T>
Var<T> mpe_block(Binding<T>& b, const std::string& prefix, const Var<T>& x, const std::vector<int>& kernels,
                 const PEConfig& pe = {});

/// Shared by the decoder and the MPE block: BatchNorm reading `prefix.*` tensors.
template <typename T>
Var<T> batch_norm(Binding<T>& b, const std::string& prefix, const Var<T>& x);
template <typename T>
Var<T> layer_norm(Binding<T>& b, const std::string& prefix, const Var<T>& x);

}  // namespace pefnet::blocks
