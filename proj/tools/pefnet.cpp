#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "pefnet/checkpoint.hpp"
#include "pefnet/gradcheck.hpp"
#include "pefnet/run_config.hpp"
#include "pefnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace pefnet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Flags shared by commands that describe a run. Each flag, when given,
// becomes a `key = value` override applied after the config file.
struct RunFlags {
  std::string config_file;
  std::string data, preset, kernels, fusion, split;
  std::size_t synth = 0, img_size = 0, epochs = 0, batch = 0;
  double alpha = 0, lr = 0, threshold = 0;
  std::uint64_t seed = 0;
  bool no_mpe = false, no_augment = false, per_image = false, no_head_norm = false;

  std::vector<std::pair<CLI::Option*, std::function<void(KeyValues&)>>> bindings;

  template <typename T>
  void bind(CLI::App* cmd, const std::string& name, T& target, const std::string& key, const std::string& help) {
    auto* opt = cmd->add_option(name, target, help);
    bindings.emplace_back(opt, [&target, key](KeyValues& kv) {
      std::ostringstream os;
      os.precision(17);
      os << target;
      kv[key] = os.str();
    });
  }
  void bind_flag(CLI::App* cmd, const std::string& name, bool& target, const std::string& key, bool value,
                 const std::string& help) {
    auto* opt = cmd->add_flag(name, target, help);
    bindings.emplace_back(opt, [key, value](KeyValues& kv) { kv[key] = value ? "true" : "false"; });
  }

  void add_model(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key = value config file; flags override it")->check(CLI::ExistingFile);
    bind(cmd, "--preset", preset, "model.preset", "toy, tiny, small or base");
    bind(cmd, "--mkcnn-kernels", kernels, "model.mkcnn_kernels", "comma-separated odd kernel sizes");
    bind(cmd, "--fusion", fusion, "model.fusion", "add or concat");
    bind_flag(cmd, "--no-mpe", no_mpe, "model.use_mpe", false, "plain skip connections without the MPE block");
    bind_flag(cmd, "--no-head-norm", no_head_norm, "model.head_norm", false,
              "drop BatchNorm from the output upsampler");
  }

  void add_data(CLI::App* cmd) {
    bind(cmd, "--data", data, "data.dir", "dataset root with images/ and masks/");
    bind(cmd, "--synth", synth, "data.synth", "generate N synthetic samples instead of reading --data");
    bind(cmd, "--img-size", img_size, "data.img_size", "square input size, a multiple of 32");
    bind(cmd, "--seed", seed, "train.seed", "seed for every random choice");
  }

  void add_training(CLI::App* cmd) {
    bind(cmd, "--split", split, "data.split", "train,val,test fractions");
    bind(cmd, "--alpha", alpha, "loss.alpha", "Jaccard smoothing factor");
    bind_flag(cmd, "--per-image-loss", per_image, "loss.per_image", true, "average per-image losses");
    bind(cmd, "--lr", lr, "train.lr", "peak learning rate");
    bind(cmd, "--epochs", epochs, "train.epochs", "number of epochs");
    bind(cmd, "--batch", batch, "train.batch_size", "mini-batch size");
    bind_flag(cmd, "--no-augment", no_augment, "train.augment", false, "disable augmentation");
  }

  void add_threshold(CLI::App* cmd) { bind(cmd, "--threshold", threshold, "train.threshold", "foreground probability cut"); }

  /// File (or checkpoint) settings, then explicit flags.
  KeyValues overrides(KeyValues base) const {
    if (!config_file.empty()) {
      for (auto& [k, v] : parse_key_values(read_file(config_file))) base[k] = v;
    }
    for (const auto& [opt, apply] : bindings) {
      if (opt->count() > 0) apply(base);
    }
    return base;
  }
};

std::vector<SegmentationSample> load_samples(const RunConfig& rc) {
  if (!rc.data_dir.empty()) return load_dataset(rc.data_dir, rc.img_size);
  if (rc.synth > 0) return synth_dataset(rc.synth, rc.img_size, rc.seed);
  throw CLI::ValidationError("a dataset is required: pass --data DIR or --synth N");
}

std::vector<SegmentationSample> pick_subset(std::vector<SegmentationSample> samples, const RunConfig& rc,
                                            const std::string& subset) {
  if (subset == "all") return samples;
  Splits s = split(std::move(samples), rc.split);
  if (subset == "train") return s.train;
  if (subset == "val") return s.val;
  return s.test;
}

int cmd_train(RunFlags& flags, const std::string& out, const std::string& resume,
              std::optional<std::uint64_t> stop_after, bool quiet) {
  std::optional<Checkpoint> ckpt;
  KeyValues base;
  if (!resume.empty()) {
    ckpt = load_checkpoint(resume);
    base = ckpt->config;
  }
  RunConfig rc = RunConfig::from_key_values(flags.overrides(base), /*strict=*/!ckpt);
  rc.validate();

  Splits parts = split(load_samples(rc), rc.split);
  if (parts.train.empty()) throw DataError("training split is empty");

  fs::create_directories(out);
  write_file(fs::path(out) / "config.txt", format_key_values(rc.to_key_values()));
  std::string ids = "sample_id,split\n";
  const std::vector<std::pair<std::string, const std::vector<SegmentationSample>*>> named{
      {"train", &parts.train}, {"val", &parts.val}, {"test", &parts.test}};
  for (const auto& [name, list] : named) {
    for (const auto& s : *list) ids += s.id + "," + name + "\n";
  }
  write_file(fs::path(out) / "splits.csv", ids);

  TrainOptions options = rc.train_options();
  options.out_dir = out;
  options.stop_after_step = stop_after;
  options.verbose = !quiet;

  if (ckpt && model_from_checkpoint(*ckpt).to_key_values() != rc.model.to_key_values()) {
    throw CLI::ValidationError("model flags differ from the checkpoint being resumed");
  }
  Trainer trainer = ckpt ? Trainer::from_checkpoint(*ckpt, options) : Trainer(rc.model, build(rc.model, rc.seed), options);
  if (!quiet) std::cerr << kMetricsHeader << "\n";
  const auto history = trainer.fit(parts.train, parts.val);
  std::cout << "steps=" << trainer.step();
  if (!history.empty()) {
    std::cout << " IoU=" << fmt6(history.back().val_iou) << " Dice=" << fmt6(history.back().val_dice);
  }
  std::cout << "\n";
  return kOk;
}

int cmd_eval(RunFlags& flags, const std::string& ckpt_path, const std::string& subset, const std::string& report,
             bool self_test) {
  std::optional<Checkpoint> ckpt;
  KeyValues base;
  if (ckpt_path.empty() && !self_test) throw CLI::ValidationError("--ckpt is required (or pass --self-test)");
  if (!ckpt_path.empty()) {
    ckpt = load_checkpoint(ckpt_path);
    base = ckpt->config;
    // The run's own dataset unless another source is named.
    const KeyValues given = flags.overrides({});
    if (given.count("data.dir") || given.count("data.synth")) {
      base.erase("data.dir");
      base.erase("data.synth");
    }
  }
  const RunConfig rc = RunConfig::from_key_values(flags.overrides(base), /*strict=*/false);
  rc.validate();
  const auto samples = pick_subset(load_samples(rc), rc, subset);
  if (samples.empty()) throw DataError("no samples to evaluate");

  EvalReport result;
  if (self_test) {
    for (const auto& s : samples) result.add(s.id, s.mask, s.mask);
  } else {
    ParameterStore params = params_from_checkpoint(*ckpt);
    result = evaluate(params, model_from_checkpoint(*ckpt), samples, rc.threshold);
  }
  if (!report.empty()) write_file(report, result.to_csv());
  std::cout << "IoU=" << fmt6(result.mean_iou()) << " Dice=" << fmt6(result.mean_dice()) << "\n";
  return kOk;
}

int cmd_predict(RunFlags& flags, const std::string& ckpt_path, const std::string& image, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig rc = RunConfig::from_key_values(flags.overrides(ckpt.config), /*strict=*/false);
  rc.validate();
  const ModelConfig model = model_from_checkpoint(ckpt);
  ParameterStore params = params_from_checkpoint(ckpt);

  const Tensor original = load_image(image);
  const std::size_t h = original.dim(1), w = original.dim(2);
  const Tensor input = resize_image(original, rc.img_size, rc.img_size).reshaped({1, 3, rc.img_size, rc.img_size});
  const Tensor mask = predict_mask(params, model, input, rc.threshold);
  write_mask_png(out, resize_mask(mask.reshaped({1, rc.img_size, rc.img_size}), h, w));
  std::cout << out << "\n";
  return kOk;
}

int cmd_summary(RunFlags& flags) {
  const RunConfig rc = RunConfig::from_key_values(flags.overrides({}), /*strict=*/false);
  rc.model.validate();
  std::printf("%-24s %8s %12s\n", "module", "tensors", "parameters");
  std::size_t total = 0;
  for (const auto& m : summarize(rc.model)) {
    std::printf("%-24s %8zu %12zu\n", m.module.c_str(), m.tensors, m.parameters);
    total += m.parameters;
  }
  std::printf("%-24s %8s %12zu\n", ("total (" + rc.model.preset + ")").c_str(), "", total);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PEFNet segmentation: training, evaluation, prediction and verification"};
  app.require_subcommand(1);

  RunFlags train_flags, eval_flags, predict_flags, summary_flags;
  std::string out, resume, ckpt, subset = "all", report, image;
  std::optional<std::uint64_t> stop_after;
  bool quiet = false, self_test = false, quick = false;
  std::size_t synth_n = 8, synth_size = 64;
  std::uint64_t seed = 0;

  auto* train = app.add_subcommand("train", "train a model; writes checkpoints, metrics.csv and config.txt");
  train_flags.add_model(train);
  train_flags.add_data(train);
  train_flags.add_training(train);
  train_flags.add_threshold(train);
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "stop at this global step");
  train->add_flag("--quiet", quiet, "no per-epoch log on stderr");

  auto* eval = app.add_subcommand("eval", "score thresholded predictions; prints IoU=<v> Dice=<v>");
  eval_flags.add_data(eval);
  eval_flags.add_threshold(eval);
  eval->add_option("--config", eval_flags.config_file, "key = value config file")->check(CLI::ExistingFile);
  eval->add_option("--ckpt", ckpt, "checkpoint to evaluate");
  eval->add_option("--subset", subset, "all, train, val or test")
      ->check(CLI::IsMember({"all", "train", "val", "test"}));
  eval->add_option("--report", report, "write per-sample CSV here");
  eval->add_flag("--self-test", self_test, "score ground-truth masks against themselves");

  auto* predict = app.add_subcommand("predict", "write a 0/255 mask PNG at the input's size");
  predict_flags.add_threshold(predict);
  predict->add_option("--img-size", predict_flags.img_size, "network input size (default: the checkpoint's)");
  predict_flags.bindings.emplace_back(predict->get_option("--img-size"), [&](KeyValues& kv) {
    kv["data.img_size"] = std::to_string(predict_flags.img_size);
  });
  predict->add_option("--ckpt", ckpt, "checkpoint")->required();
  predict->add_option("--image", image, "input PNG")->required()->check(CLI::ExistingFile);
  predict->add_option("--out", out, "output mask PNG")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_flag("--quick", quick, "fewer network parameters");
  gradcheck->add_option("--seed", seed, "seed for the random tensors");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--size", synth_size, "image side, a multiple of 32");
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out", out, "dataset root")->required();

  auto* summary = app.add_subcommand("summary", "parameter counts per module");
  summary_flags.add_model(summary);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_flags, out, resume, stop_after, quiet);
    if (*eval) return cmd_eval(eval_flags, ckpt, subset, report, self_test);
    if (*predict) return cmd_predict(predict_flags, ckpt, image, out);
    if (*gradcheck) {
      const auto result = gradcheck::run(quick, seed);
      std::cout << result.to_text();
      return result.passed() ? kOk : kNumerical;
    }
    if (*synth) {
      write_dataset(out, synth_dataset(synth_n, synth_size, seed));
      std::cout << "wrote " << synth_n << " samples to " << out << "\n";
      return kOk;
    }
    if (*summary) return cmd_summary(summary_flags);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
