#include "pefnet/blocks.hpp"

#include <cmath>

namespace pefnet::blocks {

namespace {

std::string conv_name(const std::string& prefix, int k) { return prefix + ".k" + std::to_string(k) + ".weight"; }

template <typename T>
void require_divisible(const Var<T>& x, std::size_t factor, const char* what) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError(std::string(what) + ": input must be rank 4, got " + shape_str(s));
  if (s[2] % factor != 0 || s[3] % factor != 0) {
    throw ShapeError(std::string(what) + ": spatial size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " must be divisible by " + std::to_string(factor) +
                     " (network input height and width must be divisible by 32)");
  }
}

}  // namespace

template <typename T>
Var<T> batch_norm(Binding<T>& b, const std::string& prefix, const Var<T>& x) {
  return ops::batch_norm(x, b.param(prefix + ".gamma"), b.param(prefix + ".beta"), b.running_stats(prefix), b.mode());
}

template <typename T>
Var<T> layer_norm(Binding<T>& b, const std::string& prefix, const Var<T>& x) {
  return ops::layer_norm_channels(x, b.param(prefix + ".gamma"), b.param(prefix + ".beta"));
}

void declare_convnext_block(ParamSpecs& specs, const std::string& prefix, std::size_t c) {
  const std::size_t k = kConvNeXtKernel;
  const std::size_t hidden = kConvNeXtExpansion * c;
  // The depthwise conv feeds a norm directly, so it carries no bias.
  specs.push_back({prefix + ".dw.weight", {c, 1, k, k}, Init::TruncNormal});
  declare_layer_norm(specs, prefix + ".norm", c);
  specs.push_back({prefix + ".pw1.weight", {hidden, c, 1, 1}, Init::TruncNormal});
  specs.push_back({prefix + ".pw1.bias", {hidden}, Init::Zeros});
  specs.push_back({prefix + ".pw2.weight", {c, hidden, 1, 1}, Init::TruncNormal});
  specs.push_back({prefix + ".pw2.bias", {c}, Init::Zeros});
  specs.push_back({prefix + ".layer_scale", {c}, Init::LayerScale});
}

template <typename T>
Var<T> convnext_block(Binding<T>& b, const std::string& prefix, const Var<T>& x) {
  auto y = ops::depthwise_conv2d(x, b.param(prefix + ".dw.weight"), std::nullopt, kConvNeXtKernel / 2);
  y = layer_norm(b, prefix + ".norm", y);
  y = ops::conv2d(y, b.param(prefix + ".pw1.weight"), b.param(prefix + ".pw1.bias"), 1, 0);
  y = ops::gelu(y);
  y = ops::conv2d(y, b.param(prefix + ".pw2.weight"), b.param(prefix + ".pw2.bias"), 1, 0);
  y = ops::channel_scale(y, b.param(prefix + ".layer_scale"));
  return ops::add(x, y);
}

void declare_stem(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c) {
  specs.push_back({prefix + ".conv.weight", {out_c, in_c, kStemStride, kStemStride}, Init::TruncNormal});
  declare_layer_norm(specs, prefix + ".norm", out_c);
}

template <typename T>
Var<T> stem(Binding<T>& b, const std::string& prefix, const Var<T>& x) {
  require_divisible(x, kStemStride, "stem");
  auto y = ops::conv2d(x, b.param(prefix + ".conv.weight"), std::nullopt, kStemStride, 0);
  return layer_norm(b, prefix + ".norm", y);
}

void declare_downsample(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c) {
  declare_layer_norm(specs, prefix + ".norm", in_c);
  specs.push_back({prefix + ".conv.weight", {out_c, in_c, 2, 2}, Init::TruncNormal});
  specs.push_back({prefix + ".conv.bias", {out_c}, Init::Zeros});
}

template <typename T>
Var<T> downsample(Binding<T>& b, const std::string& prefix, const Var<T>& x) {
  require_divisible(x, 2, "downsample");
  auto y = layer_norm(b, prefix + ".norm", x);
  return ops::conv2d(y, b.param(prefix + ".conv.weight"), b.param(prefix + ".conv.bias"), 2, 0);
}

void validate_kernel_set(const std::vector<int>& kernels) {
  if (kernels.empty()) throw ShapeError("mkcnn: kernel set is empty");
  for (int k : kernels) {
    if (k < 1 || k % 2 == 0) {
      throw ShapeError("mkcnn: kernel size " + std::to_string(k) + " must be odd and positive");
    }
  }
}

void declare_mkcnn(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c,
                   const std::vector<int>& kernels) {
  validate_kernel_set(kernels);
  for (int k : kernels) {
    const auto kk = static_cast<std::size_t>(k);
    specs.push_back({conv_name(prefix, k), {out_c, in_c, kk, kk}, Init::TruncNormal});
  }
}

template <typename T>
Var<T> mkcnn(Binding<T>& b, const std::string& prefix, const Var<T>& x, const std::vector<int>& kernels) {
  validate_kernel_set(kernels);
  Var<T> acc;
  for (int k : kernels) {
    auto branch = ops::conv2d(x, b.param(conv_name(prefix, k)), std::nullopt, 1, (k - 1) / 2);
    acc = acc.valid() ? ops::add(acc, branch) : branch;
  }
  return acc;
}

template <typename T>
BasicTensor<T> positional_embedding_2d(std::size_t c, std::size_t h, std::size_t w, const PEConfig& cfg) {
  if (c == 0 || c % 4 != 0) {
    throw ShapeError("positional_embedding_2d: channel count " + std::to_string(c) + " must be divisible by 4");
  }
  const std::size_t half = c / 2;
  BasicTensor<T> pe({1, c, h, w});
  for (std::size_t j = 0; j < half; ++j) {
    const std::size_t pair = j / 2;
    const double freq = std::pow(cfg.base, 2.0 * static_cast<double>(pair) / static_cast<double>(half));
    const bool use_sin = j % 2 == 0;
    auto enc = [&](std::size_t pos) {
      const double a = static_cast<double>(pos) / freq;
      return static_cast<T>(use_sin ? std::sin(a) : std::cos(a));
    };
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        pe.at(0, j, y, x) = enc(y);
        pe.at(0, half + j, y, x) = enc(x);
      }
  }
  return pe;
}

void declare_mpe(ParamSpecs& specs, const std::string& prefix, std::size_t in_c, std::size_t out_c,
                 const std::vector<int>& kernels) {
  if (out_c % 4 != 0) {
    throw ShapeError("mpe: output channels " + std::to_string(out_c) + " must be divisible by 4");
  }
  declare_mkcnn(specs, prefix + ".mkcnn", in_c, out_c, kernels);
  declare_batch_norm(specs, prefix + ".bn", out_c);
}

template <typename T>
Var<T> mpe_block(Binding<T>& b, const std::string& prefix, const Var<T>& x, const std::vector<int>& kernels,
                 const PEConfig& pe) {
  auto y = mkcnn(b, prefix + ".mkcnn", x, kernels);
  y = batch_norm(b, prefix + ".bn", y);
  const auto& s = y.shape();
  auto mask = b.tape().constant(positional_embedding_2d<T>(s[1], s[2], s[3], pe));
  return ops::add(y, mask);
}

#define PEFNET_INSTANTIATE_BLOCKS(T)                                                                       \
  template Var<T> batch_norm(Binding<T>&, const std::string&, const Var<T>&);                              \
  template Var<T> layer_norm(Binding<T>&, const std::string&, const Var<T>&);                              \
  template Var<T> convnext_block(Binding<T>&, const std::string&, const Var<T>&);                          \
  template Var<T> stem(Binding<T>&, const std::string&, const Var<T>&);                                    \
  template Var<T> downsample(Binding<T>&, const std::string&, const Var<T>&);                              \
  template Var<T> mkcnn(Binding<T>&, const std::string&, const Var<T>&, const std::vector<int>&);          \
  template BasicTensor<T> positional_embedding_2d<T>(std::size_t, std::size_t, std::size_t, const PEConfig&); \
  template Var<T> mpe_block(Binding<T>&, const std::string&, const Var<T>&, const std::vector<int>&,       \
                            const PEConfig&);

PEFNET_INSTANTIATE_BLOCKS(float)
PEFNET_INSTANTIATE_BLOCKS(double)

}  // namespace pefnet::blocks
