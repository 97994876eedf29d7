// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "pefnet/augment.hpp"
#include "pefnet/gradcheck.hpp"
#include "pefnet/trainer.hpp"

using namespace pefnet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "pefnet_acceptance";

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args, std::string* output = nullptr) {
  const auto log = kRoot / "cli_output.txt";
  const std::string cmd = std::string(PEFNET_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = read_file(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome gradient_suite() {
  Outcome o;
  const auto report = gradcheck::run(/*quick=*/false, 0);
  std::size_t networks = 0;
  for (const auto& r : report.results) {
    const bool network = r.name.find("network") != std::string::npos;
    networks += network;
    o.require(r.passed(), r.name + " rel error " + fmt("%.3g", r.max_rel_error));
    o.require(r.tolerance <= (network ? 1e-3 : 1e-4), r.name + " tolerance too loose");
    if (network) o.require(r.checked >= 200, "too few network parameters checked");
  }
  o.require(networks == 1, "end-to-end network check missing");
  o.require(report.seconds < 60.0, "suite took " + fmt("%.1f s", report.seconds));
  if (o.pass) {
    o.detail = std::to_string(report.results.size()) + " checks in " + fmt("%.1f s", report.seconds);
  }
  return o;
}

Outcome metric_identities() {
  Outcome o;
  std::mt19937_64 gen(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto a = oracle::random_mask({1, 1, 16, 16}, gen, std::uniform_real_distribution<double>(0, 1)(gen));
    const auto b = oracle::random_mask({1, 1, 16, 16}, gen, std::uniform_real_distribution<double>(0, 1)(gen));
    const double j = iou(a, b), d = dice(a, b);
    o.require(std::abs(d - 2 * j / (1 + j)) <= 1e-12, "dice/iou identity");
    o.require(j == iou(b, a) && d == dice(b, a), "symmetry");
    o.require(std::abs(j - oracle::iou(a, b)) <= 1e-12 && std::abs(d - oracle::dice(a, b)) <= 1e-12, "pixel oracle");
  }
  Tensor x({1, 1, 4, 4}), y({1, 1, 4, 4});
  for (int k : {0, 1, 2, 3}) x[k] = 1;
  for (int k : {0, 1, 4, 5}) y[k] = 1;
  o.require(std::abs(iou(x, y) - 0.333333) < 1e-6 && iou(x, y) == oracle::iou(x, y), "iou hand case");
  Tensor p({1, 1, 4, 4}), q({1, 1, 4, 4});
  for (int k : {0, 1, 2}) p[k] = 1;
  for (int k : {0, 1, 7, 8, 9}) q[k] = 1;
  o.require(dice(p, q) == 0.5 && dice(p, q) == oracle::dice(p, q), "dice hand case");
  if (o.pass) o.detail = "1000 pairs, hand cases 0.333333 / 0.5";
  return o;
}

Outcome loss_oracle() {
  Outcome o;
  const Tensor ones({4}, 1.0f), zeros({4}, 0.0f);
  const Tensor y2({2}, std::vector<float>{1, 0}), half({2}, 0.5f);
  o.require(jaccard_loss_value(ones, ones) == 0.0, "identical example");
  o.require(std::abs(jaccard_loss_value(ones, zeros) - 0.8) < 1e-6, "0.8 example");
  o.require(std::abs(jaccard_loss_value(y2, half) - 0.4) < 1e-6, "0.4 example");
  std::mt19937_64 gen(99);
  for (int i = 0; i < 100; ++i) {
    const auto t = oracle::random_mask({1, 1, 8, 8}, gen);
    o.require(jaccard_loss_value(t, t) == 0.0, "zero on equal prediction");
    auto other = oracle::random_mask({1, 1, 8, 8}, gen);
    other[i % 64] = 1.0f - t[i % 64];
    o.require(jaccard_loss_value(t, other) > 0.0, "positive on a different prediction");
  }
  if (o.pass) o.detail = "0.0 / 0.8 / 0.4, 100 random targets";
  return o;
}

Outcome positional_embedding() {
  Outcome o;
  const std::size_t c = 16;
  const auto pe = blocks::positional_embedding_2d<float>(c, 32, 32);
  for (float v : pe.data()) o.require(v >= -1.0f && v <= 1.0f, "entry outside [-1, 1]");
  for (std::size_t k = 0; k < c; ++k) {
    const bool sine = k % 2 == 0;
    const bool row = k < c / 2;
    for (std::size_t t = 0; t < 32; ++t) {
      const float v = row ? pe.at(0, k, 0, t) : pe.at(0, k, t, 0);
      o.require(v == (sine ? 0.0f : 1.0f), "pos 0 channel value");
    }
  }
  std::set<std::vector<float>> seen;
  for (std::size_t yy = 0; yy < 32; ++yy)
    for (std::size_t xx = 0; xx < 32; ++xx) {
      std::vector<float> v(c);
      for (std::size_t k = 0; k < c; ++k) v[k] = pe.at(0, k, yy, xx);
      seen.insert(v);
    }
  o.require(seen.size() == 32 * 32, "duplicate embedding vectors");
  o.require(pe == blocks::positional_embedding_2d<float>(c, 32, 32), "not deterministic");
  if (o.pass) o.detail = "1024 distinct vectors, c=16";
  return o;
}

Outcome mpe_isolation() {
  Outcome o;
  ParamSpecs specs;
  blocks::declare_mpe(specs, "skip", 16, 16, {1, 3, 5, 7});
  auto store = materialize<float>(specs, 3);
  for (auto& e : store.entries()) {
    if (e.name.find(".mkcnn.") != std::string::npos || e.name.ends_with(".gamma") || e.name.ends_with(".beta"))
      e.value.fill(0.0f);
  }
  std::mt19937_64 gen(5);
  const auto x = oracle::random32({2, 16, 8, 8}, gen);
  Tape<float> tape;
  Binding<float> bind(tape, store, ops::Mode::Train);
  const auto y = blocks::mpe_block(bind, "skip", tape.constant(x), {1, 3, 5, 7}).value();
  const auto pe = blocks::positional_embedding_2d<float>(16, 8, 8);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < pe.numel(); ++i) o.require(y[n * pe.numel() + i] == pe[i], "output differs from mask");
  if (o.pass) o.detail = "bit-exact";
  return o;
}

ModelConfig toy() { return ModelConfig::from_preset("toy"); }

// The overfit task: 8 synthetic 64x64 samples, batch 4, 300 steps.
struct OverfitRun {
  std::vector<EpochMetrics> history;
  double train_dice = 0;
  double seconds = 0;
};

OverfitRun overfit(const ModelConfig& model) {
  const auto data = synth_dataset(8, 64, 7);
  TrainOptions opt;
  opt.epochs = 150;
  opt.batch_size = 4;
  opt.lr_max = 1e-4;
  opt.seed = 7;
  opt.augment = false;
  const auto t0 = Clock::now();
  Trainer t(model, build(model, 7), opt);
  OverfitRun r;
  r.history = t.fit(data, {});
  r.train_dice = evaluate(t.params(), t.model(), data).mean_dice();
  r.seconds = seconds_since(t0);
  return r;
}

Outcome overfit_test(const OverfitRun& r) {
  Outcome o;
  o.require(!r.history.empty() && r.history.back().step == 300, "wrong step count");
  o.require(r.train_dice >= 0.95, "training-set Dice " + fmt("%.4f", r.train_dice) + " < 0.95");
  o.require(r.seconds < 600, "took " + fmt("%.0f s", r.seconds));
  if (o.pass) o.detail = "Dice " + fmt("%.4f", r.train_dice) + " in " + fmt("%.0f s", r.seconds);
  else o.detail += " (" + fmt("%.0f s", r.seconds) + ")";
  return o;
}

Outcome ablation(OverfitRun with_mpe) {
  Outcome o;
  if (with_mpe.history.empty()) with_mpe = overfit(toy());
  auto plain = toy();
  plain.use_mpe = false;
  OverfitRun without = overfit(plain);
  for (const auto* r : {&with_mpe, &without}) {
    const std::string name = r == &with_mpe ? "MPE" : "no-MPE";
    bool finite = true;
    for (const auto& m : r->history) finite = finite && std::isfinite(m.train_loss);
    o.require(finite, name + " loss not finite");
    o.require(r->history.back().train_loss < r->history.front().train_loss, name + " loss did not decrease");
    o.require(r->train_dice >= 0.8, name + " Dice " + fmt("%.3f", r->train_dice));
  }
  std::vector<unsigned long long> totals;
  for (const char* preset : {"toy", "tiny", "small", "base"}) {
    std::string out;
    const int code = cli(std::string("summary --preset ") + preset, &out);
    o.require(code == 0, "summary failed");
    const auto pos = out.find("total (");
    unsigned long long total = 0;
    if (pos != std::string::npos) std::sscanf(out.c_str() + out.find(')', pos) + 1, "%llu", &total);
    o.require(total > 0, std::string("no total for ") + preset);
    totals.push_back(total);
  }
  o.require(totals[3] > totals[2] && totals[2] > totals[1] && totals[1] > totals[0], "preset ordering");
  if (o.pass) {
    o.detail = "Dice MPE " + fmt("%.3f", with_mpe.train_dice) + " / no-MPE " + fmt("%.3f", without.train_dice) +
               "; params tiny " + std::to_string(totals[1]) + " < small " + std::to_string(totals[2]) + " < base " +
               std::to_string(totals[3]);
  }
  return o;
}

Outcome determinism() {
  Outcome o;
  const std::string run = "train --synth 8 --img-size 32 --preset toy --epochs 4 --batch 2 --lr 1e-3 --seed 3 --quiet ";
  const auto a = kRoot / "det_a", b = kRoot / "det_b", c = kRoot / "det_c";
  o.require(cli(run + "--out " + a.string()) == 0, "first run failed");
  o.require(cli(run + "--out " + b.string()) == 0, "second run failed");
  o.require(read_file(a / "metrics.csv") == read_file(b / "metrics.csv"), "metrics differ between runs");

  o.require(cli(run + "--stop-after 5 --out " + c.string()) == 0, "interrupted run failed");
  o.require(cli("train --resume " + (c / "last.ckpt").string() + " --quiet --out " + c.string()) == 0, "resume failed");
  o.require(read_file(c / "metrics.csv") == read_file(a / "metrics.csv"), "resumed metrics differ");
  o.require(read_file(c / "last.ckpt") == read_file(a / "last.ckpt"), "resumed checkpoint differs");

  const auto ck = load_checkpoint(a / "last.ckpt");
  auto params = params_from_checkpoint(ck);
  const auto model = model_from_checkpoint(ck);
  save_checkpoint(kRoot / "copy.ckpt", ck);
  const auto again = load_checkpoint(kRoot / "copy.ckpt");
  auto params2 = params_from_checkpoint(again);
  std::mt19937_64 gen(4);
  const auto x = oracle::random32({2, 3, 32, 32}, gen);
  o.require(predict_logits(params, model, x) == predict_logits(params2, model, x), "forward differs after reload");
  o.require(read_file(kRoot / "copy.ckpt") == read_file(a / "last.ckpt"), "re-saved checkpoint differs");
  if (o.pass) o.detail = "CSV, resume and reload bit-identical";
  return o;
}

Outcome augmentation_contract() {
  Outcome o;
  const auto data = synth_dataset(10, 64, 11);
  for (const auto& s : data) {
    const auto twice = hflip(hflip(s));
    o.require(twice.image == s.image && twice.mask == s.mask, "double flip not identity");
  }
  auto policy = AugmentationPolicy::none();
  policy.p_cutout = 1.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng(augment_seed(1, i, 0));
    AugmentRecord rec;
    const auto out = augment(data[i], policy, rng, &rec);
    o.require(!rec.holes.empty(), "no holes recorded");
    for (const auto& h : rec.holes)
      for (std::size_t yy = h.y; yy < h.y + h.side; ++yy)
        for (std::size_t xx = h.x; xx < h.x + h.side; ++xx) {
          o.require(out.mask[yy * 64 + xx] == 0.0f, "mask not cleared in hole");
          for (std::size_t c = 0; c < 3; ++c)
            o.require(out.image[(c * 64 + yy) * 64 + xx] == -1.0f, "image not -1 in hole");
        }
  }
  const auto parts = split(data, SplitSpec{0.6, 0.2, 0.2, 5});
  o.require(parts.train.size() == 6 && parts.val.size() == 2 && parts.test.size() == 2, "split sizes");
  std::set<std::string> ids;
  for (const auto* part : {&parts.train, &parts.val, &parts.test})
    for (const auto& s : *part) ids.insert(s.id);
  o.require(ids.size() == 10, "split is not a partition");
  if (o.pass) o.detail = "flip, cutout, 6/2/2";
  return o;
}

Outcome adjoint() {
  Outcome o;
  std::mt19937_64 gen(50);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const int s = 1 + i % 3;
    const std::size_t k = static_cast<std::size_t>(s) + (i / 3) % 3, ci = 1 + i % 4, co = 1 + (i / 4) % 4;
    const std::size_t oh = 1 + i % 5, ow = 1 + (i / 5) % 5;
    const auto x = oracle::random64({1, ci, (oh - 1) * s + k, (ow - 1) * s + k}, gen);
    const auto w = oracle::random64({co, ci, k, k}, gen);
    const auto y = oracle::random64({1, co, oh, ow}, gen);
    Tape<double> tape;
    const auto cx = ops::conv2d(tape.leaf(x), tape.leaf(w), std::nullopt, s, 0).value();
    const auto ty = ops::conv_transpose2d(tape.leaf(y), tape.leaf(w), std::nullopt, s).value();
    const double lhs = oracle::dot(cx, y), rhs = oracle::dot(x, ty);
    const double err = std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
    worst = std::max(worst, err);
    o.require(err <= 1e-4, "inner products differ");
  }
  o.detail = "max rel difference " + fmt("%.2g", worst);
  return o;
}

}  // namespace

int main() {
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);

  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << name << " (" << o.detail << ")"
              << std::endl;
  };

  report(1, "gradient suite", gradient_suite);
  report(2, "metric identities", metric_identities);
  report(3, "loss oracle", loss_oracle);
  report(4, "positional embedding", positional_embedding);
  report(5, "MPE isolation", mpe_isolation);
  OverfitRun with_mpe;
  report(6, "overfit test", [&] {
    with_mpe = overfit(toy());
    return overfit_test(with_mpe);
  });
  report(7, "ablation mechanics", [&] { return ablation(with_mpe); });
  report(8, "determinism and persistence", determinism);
  report(9, "augmentation contract", augmentation_contract);
  report(10, "adjoint property", adjoint);

  fs::remove_all(kRoot);
  std::cout << (10 - failed) << "/10 criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
