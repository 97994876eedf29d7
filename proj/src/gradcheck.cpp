#include "pefnet/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <utility>

#include "pefnet/blocks.hpp"
#include "pefnet/loss.hpp"
#include "pefnet/network.hpp"
#include "pefnet/rng.hpp"

namespace pefnet::gradcheck {

namespace {

using Store = BasicParameterStore<double>;
using Named = std::vector<std::pair<std::string, Shape>>;

Tensor64 random_tensor(const Shape& shape, Rng& rng) {
  Tensor64 t(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

Store random_store(const Named& tensors, Rng& rng) {
  Store s;
  for (const auto& [name, shape] : tensors) s.add(name, random_tensor(shape, rng));
  return s;
}

/// Materializes specs, then replaces every trainable tensor with N(0, 1) draws
/// so that no gradient is degenerate (layer scales of 1e-6, gammas of 1).
Store randomized(const ParamSpecs& specs, Rng& rng) {
  Store s = materialize<double>(specs, rng.next());
  for (auto& e : s.entries()) {
    if (e.trainable) e.value = random_tensor(e.value.shape(), rng);
  }
  return s;
}

void add_running_stats(Store& s, const std::string& prefix, std::size_t c, Rng& rng) {
  Tensor64 mean({c}), var({c});
  for (std::size_t i = 0; i < c; ++i) {
    mean[i] = rng.normal();
    var[i] = rng.uniform(0.5, 2.0);
  }
  s.add(prefix + ".running_mean", std::move(mean), false);
  s.add(prefix + ".running_var", std::move(var), false);
  s.add(prefix + ".num_batches", Tensor64::scalar(1.0), false);
}

Tensor64 binary_target(const Shape& shape, Rng& rng) {
  Tensor64 t(shape);
  for (auto& v : t.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  return t;
}

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

Var<double> project(const Var<double>& y) {
  Rng rng(0x70726f6aULL + y.value().numel());
  Tensor64 r(y.shape());
  for (auto& v : r.data()) v = rng.uniform(-1.0, 1.0);
  return ops::sum(ops::mul(y, y.tape()->constant(std::move(r))));
}

Result check(std::string name, const ScalarFn& f, Store store, ops::Mode mode, const Options& options) {
  Result result;
  result.name = std::move(name);
  result.tolerance = options.tolerance;

  std::map<std::string, Tensor64> grads;
  {
    Tape<double> tape;
    Binding<double> binding(tape, store, mode);
    const auto y = f(binding);
    if (y.value().numel() != 1) throw ShapeError("gradcheck: function must return a scalar, got " + shape_str(y.shape()));
    tape.backward(y);
    grads = binding.gradients();
  }

  std::vector<std::pair<std::size_t, std::size_t>> elements;
  for (std::size_t i = 0; i < store.entries().size(); ++i) {
    const auto& e = store.entries()[i];
    if (!e.trainable) continue;
    for (std::size_t j = 0; j < e.value.numel(); ++j) elements.emplace_back(i, j);
  }
  if (options.max_samples != 0 && elements.size() > options.max_samples) {
    Rng rng(derive_seed(options.seed, {elements.size()}));
    rng.shuffle(elements.begin(), elements.end());
    elements.resize(options.max_samples);
    std::sort(elements.begin(), elements.end());
  }

  auto evaluate = [&] {
    Tape<double> tape;
    Binding<double> binding(tape, store, mode, /*requires_grad=*/false);
    return f(binding).value().item();
  };

  const double h = options.step;
  for (const auto& [i, j] : elements) {
    auto& e = store.entries()[i];
    const double original = e.value[j];
    e.value[j] = original + h;
    const double up = evaluate();
    e.value[j] = original - h;
    const double down = evaluate();
    e.value[j] = original;

    const double numeric = (up - down) / (2 * h);
    const auto it = grads.find(e.name);
    const double analytic = it == grads.end() ? 0.0 : it->second[j];
    const double err = relative_error(analytic, numeric);
    if (err > result.max_rel_error || result.checked == 0) {
      result.max_rel_error = std::max(result.max_rel_error, err);
      result.worst = e.name + "[" + std::to_string(j) + "]";
    }
    ++result.checked;
  }
  return result;
}

std::vector<Result> op_suite(std::uint64_t seed) {
  std::vector<Result> out;
  Rng rng(derive_seed(seed, {0x6f7073ULL}));
  const Options opt{1e-4, 1e-4, 0, seed};
  using ops::Mode;
  auto run = [&](const char* name, Store store, Mode mode, const ScalarFn& f) {
    out.push_back(check(name, f, std::move(store), mode, opt));
  };

  run("conv2d 3x3 stride 1 pad 1", random_store({{"x", {2, 3, 5, 5}}, {"w", {4, 3, 3, 3}}, {"b", {4}}}, rng),
      Mode::Train, [](Binding<double>& b) {
        return project(ops::conv2d(b.param("x"), b.param("w"), b.param("b"), 1, 1));
      });
  run("conv2d 3x3 stride 2 pad 1", random_store({{"x", {1, 2, 5, 5}}, {"w", {3, 2, 3, 3}}, {"b", {3}}}, rng),
      Mode::Train, [](Binding<double>& b) {
        return project(ops::conv2d(b.param("x"), b.param("w"), b.param("b"), 2, 1));
      });
  run("conv2d 1x1", random_store({{"x", {2, 3, 4, 4}}, {"w", {5, 3, 1, 1}}, {"b", {5}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::conv2d(b.param("x"), b.param("w"), b.param("b"), 1, 0)); });
  run("conv2d 2x2 stride 2 no bias", random_store({{"x", {2, 2, 4, 4}}, {"w", {3, 2, 2, 2}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::conv2d(b.param("x"), b.param("w"), std::nullopt, 2, 0)); });
  run("depthwise_conv2d 3x3", random_store({{"x", {2, 3, 5, 5}}, {"w", {3, 1, 3, 3}}, {"b", {3}}}, rng),
      Mode::Train, [](Binding<double>& b) {
        return project(ops::depthwise_conv2d(b.param("x"), b.param("w"), b.param("b"), 1));
      });
  run("depthwise_conv2d 5x5 no bias", random_store({{"x", {1, 2, 5, 5}}, {"w", {2, 1, 5, 5}}}, rng), Mode::Train,
      [](Binding<double>& b) {
        return project(ops::depthwise_conv2d(b.param("x"), b.param("w"), std::nullopt, 2));
      });
  run("conv_transpose2d 2x2 stride 2", random_store({{"x", {2, 3, 3, 3}}, {"w", {3, 2, 2, 2}}, {"b", {2}}}, rng),
      Mode::Train, [](Binding<double>& b) {
        return project(ops::conv_transpose2d(b.param("x"), b.param("w"), b.param("b"), 2));
      });
  run("conv_transpose2d 3x3 stride 1", random_store({{"x", {1, 2, 3, 3}}, {"w", {2, 3, 3, 3}}}, rng), Mode::Train,
      [](Binding<double>& b) {
        return project(ops::conv_transpose2d(b.param("x"), b.param("w"), std::nullopt, 1));
      });

  {
    Store s = random_store({{"x", {3, 2, 4, 4}}, {"bn.gamma", {2}}, {"bn.beta", {2}}}, rng);
    add_running_stats(s, "bn", 2, rng);
    run("batch_norm train", s, Mode::Train,
        [](Binding<double>& b) { return project(blocks::batch_norm(b, "bn", b.param("x"))); });
    run("batch_norm eval", std::move(s), Mode::Eval,
        [](Binding<double>& b) { return project(blocks::batch_norm(b, "bn", b.param("x"))); });
  }
  run("layer_norm_channels", random_store({{"x", {2, 4, 3, 3}}, {"ln.gamma", {4}}, {"ln.beta", {4}}}, rng),
      Mode::Train, [](Binding<double>& b) { return project(blocks::layer_norm(b, "ln", b.param("x"))); });
  run("gelu", random_store({{"x", {2, 3, 4, 4}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::gelu(b.param("x"))); });
  run("sigmoid", random_store({{"x", {2, 3, 4, 4}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::sigmoid(b.param("x"))); });
  run("add", random_store({{"a", {2, 3, 4, 4}}, {"b", {2, 3, 4, 4}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::add(b.param("a"), b.param("b"))); });
  run("add batch broadcast", random_store({{"a", {2, 3, 4, 4}}, {"b", {1, 3, 4, 4}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::add(b.param("a"), b.param("b"))); });
  run("mul", random_store({{"a", {2, 3, 4}}, {"b", {2, 3, 4}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::mul(b.param("a"), b.param("b"))); });
  run("scale", random_store({{"a", {3, 5}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::scale(b.param("a"), -1.7)); });
  run("channel_scale", random_store({{"x", {2, 3, 4, 4}}, {"g", {3}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::channel_scale(b.param("x"), b.param("g"))); });
  run("concat_channels", random_store({{"a", {2, 1, 3, 3}}, {"b", {2, 2, 3, 3}}}, rng), Mode::Train,
      [](Binding<double>& b) { return project(ops::concat_channels(b.param("a"), b.param("b"))); });
  run("sum", random_store({{"x", {2, 3, 4}}}, rng), Mode::Train,
      [](Binding<double>& b) { return ops::sum(b.param("x")); });

  for (const bool per_image : {false, true}) {
    for (const double alpha : {1.0, 0.5}) {
      const Tensor64 target = binary_target({2, 1, 4, 4}, rng);
      const LossConfig cfg{alpha, per_image};
      const std::string name = std::string("jaccard_loss ") + (per_image ? "per-image" : "pooled") +
                               (alpha == 1.0 ? " alpha 1" : " alpha 0.5");
      run(name.c_str(), random_store({{"z", {2, 1, 4, 4}}}, rng), Mode::Train, [target, cfg](Binding<double>& b) {
        return jaccard_loss(target, ops::sigmoid(b.param("z")), cfg);
      });
    }
  }

  {
    ParamSpecs specs{{"x", {2, 4, 5, 5}}};
    blocks::declare_convnext_block(specs, "blk", 4);
    run("convnext_block", randomized(specs, rng), Mode::Train,
        [](Binding<double>& b) { return project(blocks::convnext_block(b, "blk", b.param("x"))); });
  }
  {
    ParamSpecs specs{{"x", {2, 3, 4, 4}}};
    blocks::declare_stem(specs, "stem", 3, 4);
    run("stem", randomized(specs, rng), Mode::Train,
        [](Binding<double>& b) { return project(blocks::stem(b, "stem", b.param("x"))); });
  }
  {
    ParamSpecs specs{{"x", {2, 4, 4, 4}}};
    blocks::declare_downsample(specs, "down", 4, 4);
    run("downsample", randomized(specs, rng), Mode::Train,
        [](Binding<double>& b) { return project(blocks::downsample(b, "down", b.param("x"))); });
  }
  {
    const std::vector<int> kernels{1, 3, 5};
    ParamSpecs specs{{"x", {2, 3, 5, 5}}};
    blocks::declare_mkcnn(specs, "mk", 3, 4, kernels);
    run("mkcnn", randomized(specs, rng), Mode::Train,
        [kernels](Binding<double>& b) { return project(blocks::mkcnn(b, "mk", b.param("x"), kernels)); });
  }
  {
    const std::vector<int> kernels{1, 3};
    ParamSpecs specs{{"x", {2, 3, 4, 4}}};
    blocks::declare_mpe(specs, "mpe", 3, 4, kernels);
    Store s = randomized(specs, rng);
    run("mpe_block train", s, Mode::Train,
        [kernels](Binding<double>& b) { return project(blocks::mpe_block(b, "mpe", b.param("x"), kernels)); });
    s.at("mpe.bn.num_batches")[0] = 1.0;
    s.at("mpe.bn.running_var").fill(1.5);
    run("mpe_block eval", std::move(s), Mode::Eval,
        [kernels](Binding<double>& b) { return project(blocks::mpe_block(b, "mpe", b.param("x"), kernels)); });
  }
  return out;
}

Result network_check(std::uint64_t seed, std::size_t samples) {
  ModelConfig config = ModelConfig::from_preset("toy");
  config.widths = {8, 16, 32, 64};
  config.head_channels = 8;

  Rng rng(derive_seed(seed, {0x6e6574ULL}));
  Tensor64 x({1, 3, 32, 32});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  // A centred square keeps the target spatially coherent.
  Tensor64 target({1, 1, 32, 32});
  for (std::size_t y = 8; y < 24; ++y)
    for (std::size_t c = 10; c < 26; ++c) target.at(0, 0, y, c) = 1.0;

  Store store = build(config, seed).cast<double>();
  const ScalarFn f = [&](Binding<double>& b) {
    const auto logits = forward(b, config, b.tape().constant(x));
    return jaccard_loss(target, ops::sigmoid(logits), LossConfig{});
  };
  const Options opt{1e-4, 1e-3, samples, seed};
  return check("network toy 1x3x32x32 jaccard", f, std::move(store), ops::Mode::Train, opt);
}

bool Report::passed() const {
  return !results.empty() && std::all_of(results.begin(), results.end(), [](const Result& r) { return r.passed(); });
}

std::string Report::to_text() const {
  std::string out;
  std::size_t ok = 0;
  char line[256];
  for (const auto& r : results) {
    if (r.passed()) ++ok;
    std::snprintf(line, sizeof line, "%-36s %6zu checked  max_rel %.3e  tol %.0e  %s  (worst %s)\n", r.name.c_str(),
                  r.checked, r.max_rel_error, r.tolerance, r.passed() ? "PASS" : "FAIL", r.worst.c_str());
    out += line;
  }
  std::snprintf(line, sizeof line, "gradcheck: %zu/%zu passed in %.2f s\n", ok, results.size(), seconds);
  out += line;
  return out;
}

Report run(bool quick, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  Report report;
  report.results = op_suite(seed);
  report.results.push_back(network_check(seed, quick ? 200 : 500));
  report.seconds = elapsed_seconds(start);
  return report;
}

}  // namespace pefnet::gradcheck
