#include "pefnet/network.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace pefnet {

namespace {

std::string stage(std::size_t s) { return "enc.stage" + std::to_string(s); }
std::string block(std::size_t s, std::size_t j) { return stage(s) + ".block" + std::to_string(j); }
std::string level(const char* what, std::size_t l) { return std::string(what) + std::to_string(l); }

std::string format_array(const std::array<std::size_t, 4>& a) {
  return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," + std::to_string(a[3]);
}

std::array<std::size_t, 4> parse_array(const std::string& key, const std::string& text) {
  const auto v = parse_int_list(text);
  if (v.size() != 4) throw DataError(key + ": expected 4 comma-separated integers, got '" + text + "'");
  std::array<std::size_t, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (v[i] <= 0) throw DataError(key + ": entries must be positive");
    out[i] = static_cast<std::size_t>(v[i]);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw DataError(key + ": expected true or false, got '" + v + "'");
}

}  // namespace

std::string_view to_string(Fusion f) { return f == Fusion::Add ? "add" : "concat"; }

Fusion parse_fusion(std::string_view s) {
  if (s == "add") return Fusion::Add;
  if (s == "concat") return Fusion::Concat;
  throw DataError("unknown fusion mode '" + std::string(s) + "' (expected add or concat)");
}

void ModelConfig::validate() const {
  for (std::size_t i = 0; i < 4; ++i) {
    if (depths[i] == 0) throw ShapeError("stage depth must be at least 1");
    if (widths[i] == 0 || widths[i] % 4 != 0) {
      throw ShapeError("stage width " + std::to_string(widths[i]) + " must be a positive multiple of 4");
    }
  }
  if (head_channels == 0) throw ShapeError("head_channels must be positive");
  if (!(pe_base > 1.0)) throw ShapeError("pe_base must be greater than 1");
  blocks::validate_kernel_set(mkcnn_kernels);
}

ModelConfig ModelConfig::from_preset(std::string_view name) {
  ModelConfig c;
  c.preset = std::string(name);
  if (name == "toy") {
    c.depths = {1, 1, 1, 1};
    c.widths = {16, 32, 64, 128};
    c.head_channels = 16;
  } else if (name == "tiny") {
    c.depths = {3, 3, 9, 3};
    c.widths = {96, 192, 384, 768};
    c.head_channels = 48;
  } else if (name == "small") {
    c.depths = {3, 3, 27, 3};
    c.widths = {96, 192, 384, 768};
    c.head_channels = 48;
  } else if (name == "base") {
    c.depths = {3, 3, 27, 3};
    c.widths = {128, 256, 512, 1024};
    c.head_channels = 64;
  } else {
    throw DataError("unknown preset '" + std::string(name) + "' (expected toy, tiny, small or base)");
  }
  return c;
}

KeyValues ModelConfig::to_key_values() const {
  std::ostringstream base;
  base.precision(17);
  base << pe_base;
  return {
      {"model.preset", preset},
      {"model.depths", format_array(depths)},
      {"model.widths", format_array(widths)},
      {"model.mkcnn_kernels", format_int_list(mkcnn_kernels)},
      {"model.fusion", std::string(to_string(fusion))},
      {"model.pe_base", base.str()},
      {"model.head_channels", std::to_string(head_channels)},
      {"model.use_mpe", use_mpe ? "true" : "false"},
      {"model.head_norm", head_norm ? "true" : "false"},
  };
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto v = get("model.preset")) c = from_preset(*v);
  if (auto v = get("model.depths")) c.depths = parse_array("model.depths", *v);
  if (auto v = get("model.widths")) c.widths = parse_array("model.widths", *v);
  if (auto v = get("model.mkcnn_kernels")) c.mkcnn_kernels = parse_int_list(*v);
  if (auto v = get("model.fusion")) c.fusion = parse_fusion(*v);
  if (auto v = get("model.pe_base")) c.pe_base = std::stod(*v);
  if (auto v = get("model.head_channels")) c.head_channels = static_cast<std::size_t>(std::stoul(*v));
  if (auto v = get("model.use_mpe")) c.use_mpe = parse_bool("model.use_mpe", *v);
  if (auto v = get("model.head_norm")) c.head_norm = parse_bool("model.head_norm", *v);
  return c;
}

ParamSpecs model_specs(const ModelConfig& config) {
  config.validate();
  const auto& w = config.widths;
  ParamSpecs specs;

  blocks::declare_stem(specs, "enc.stem", kInputChannels, w[0]);
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) blocks::declare_downsample(specs, level("enc.down", s), w[s - 1], w[s]);
    for (std::size_t j = 0; j < config.depths[s]; ++j) blocks::declare_convnext_block(specs, block(s, j), w[s]);
  }

  if (config.use_mpe) {
    for (std::size_t l = 0; l < 3; ++l) blocks::declare_mpe(specs, level("skip", l), w[l], w[l], config.mkcnn_kernels);
  }

  for (std::size_t l = 3; l-- > 0;) {
    const std::string up = level("dec.up", l);
    specs.push_back({up + ".weight", {w[l + 1], w[l], 2, 2}, Init::TruncNormal});
    specs.push_back({up + ".bias", {w[l]}, Init::Zeros});
    if (config.fusion == Fusion::Concat) {
      const std::string fuse = level("dec.fuse", l);
      specs.push_back({fuse + ".weight", {w[l], 2 * w[l], 1, 1}, Init::TruncNormal});
      specs.push_back({fuse + ".bias", {w[l]}, Init::Zeros});
    }
    const std::string refine = level("dec.refine", l);
    specs.push_back({refine + ".conv.weight", {w[l], w[l], 3, 3}, Init::TruncNormal});
    declare_batch_norm(specs, refine + ".bn", w[l]);
  }

  const std::size_t hc = config.head_channels;
  specs.push_back({"head.up0.weight", {w[0], hc, 2, 2}, Init::TruncNormal});
  specs.push_back({"head.up0.bias", {hc}, Init::Zeros});
  if (config.head_norm) declare_batch_norm(specs, "head.norm0", hc);
  specs.push_back({"head.up1.weight", {hc, hc, 2, 2}, Init::TruncNormal});
  specs.push_back({"head.up1.bias", {hc}, Init::Zeros});
  if (config.head_norm) declare_batch_norm(specs, "head.norm1", hc);
  specs.push_back({"head.out.weight", {1, hc, 1, 1}, Init::TruncNormal});
  specs.push_back({"head.out.bias", {1}, Init::Zeros});
  return specs;
}

ParameterStore build(const ModelConfig& config, std::uint64_t seed) {
  return materialize<float>(model_specs(config), seed);
}

template <typename T>
Var<T> forward(Binding<T>& b, const ModelConfig& config, const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != kInputChannels) {
    throw ShapeError("forward: input must be (batch, 3, height, width), got " + shape_str(s));
  }
  if (s[2] % kNetworkStride != 0 || s[3] % kNetworkStride != 0) {
    throw ShapeError("forward: input height and width must be divisible by 32, got " + std::to_string(s[2]) + "x" +
                     std::to_string(s[3]));
  }
  const blocks::PEConfig pe{config.pe_base};

  // Encoder taps at strides 4, 8, 16, 32.
  std::array<Var<T>, 4> taps;
  Var<T> y = blocks::stem(b, "enc.stem", x);
  for (std::size_t st = 0; st < 4; ++st) {
    if (st > 0) y = blocks::downsample(b, level("enc.down", st), y);
    for (std::size_t j = 0; j < config.depths[st]; ++j) y = blocks::convnext_block(b, block(st, j), y);
    taps[st] = y;
  }

  Var<T> d = taps[3];
  for (std::size_t l = 3; l-- > 0;) {
    const std::string up = level("dec.up", l);
    d = ops::conv_transpose2d(d, b.param(up + ".weight"), b.param(up + ".bias"), 2);
    const Var<T> skip =
        config.use_mpe ? blocks::mpe_block(b, level("skip", l), taps[l], config.mkcnn_kernels, pe) : taps[l];
    if (config.fusion == Fusion::Add) {
      d = ops::add(skip, d);
    } else {
      const std::string fuse = level("dec.fuse", l);
      d = ops::conv2d(ops::concat_channels(skip, d), b.param(fuse + ".weight"), b.param(fuse + ".bias"), 1, 0);
    }
    const std::string refine = level("dec.refine", l);
    d = ops::conv2d(d, b.param(refine + ".conv.weight"), std::nullopt, 1, 1);
    d = ops::gelu(blocks::batch_norm(b, refine + ".bn", d));
  }

  d = ops::conv_transpose2d(d, b.param("head.up0.weight"), b.param("head.up0.bias"), 2);
  if (config.head_norm) d = blocks::batch_norm(b, "head.norm0", d);
  d = ops::gelu(d);
  d = ops::conv_transpose2d(d, b.param("head.up1.weight"), b.param("head.up1.bias"), 2);
  if (config.head_norm) d = blocks::batch_norm(b, "head.norm1", d);
  return ops::conv2d(d, b.param("head.out.weight"), b.param("head.out.bias"), 1, 0);
}

Tensor predict_logits(ParameterStore& store, const ModelConfig& config, const Tensor& x) {
  Tape<float> tape;
  Binding<float> binding(tape, store, ops::Mode::Eval, /*requires_grad=*/false);
  return forward(binding, config, tape.constant(x)).value();
}

Tensor threshold_logits(const Tensor& logits, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error("threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  Tensor mask(logits.shape());
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
    mask[i] = p >= threshold ? 1.0f : 0.0f;
  }
  return mask;
}

Tensor predict_mask(ParameterStore& store, const ModelConfig& config, const Tensor& x, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error("threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  return threshold_logits(predict_logits(store, config, x), threshold);
}

std::vector<ModuleSummary> summarize(const ModelConfig& config) {
  std::vector<ModuleSummary> out;
  std::map<std::string, std::size_t> index;
  for (const auto& spec : model_specs(config)) {
    if (!spec.trainable) continue;
    // Group by the first two name components, e.g. enc.stage2 or skip0.mkcnn.
    const auto first = spec.name.find('.');
    const auto second = spec.name.find('.', first + 1);
    const std::string module = spec.name.substr(0, second);
    auto [it, inserted] = index.emplace(module, out.size());
    if (inserted) out.push_back({module, 0, 0});
    auto& m = out[it->second];
    m.tensors += 1;
    m.parameters += shape_numel(spec.shape);
  }
  return out;
}

std::size_t count_parameters(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& m : summarize(config)) n += m.parameters;
  return n;
}

template Var<float> forward(Binding<float>&, const ModelConfig&, const Var<float>&);
template Var<double> forward(Binding<double>&, const ModelConfig&, const Var<double>&);

}  // namespace pefnet
