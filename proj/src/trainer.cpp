#include "pefnet/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

namespace pefnet {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::string& require_key(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DataError("checkpoint config is missing '" + key + "'");
  return it->second;
}

std::uint64_t get_u64(const KeyValues& kv, const std::string& key) { return std::stoull(require_key(kv, key)); }
double get_double(const KeyValues& kv, const std::string& key) { return std::stod(require_key(kv, key)); }

}  // namespace

std::string format_metrics_row(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%llu,%.9g,%.9g,%.6f,%.6f", m.epoch, static_cast<unsigned long long>(m.step), m.lr,
                m.train_loss, m.val_iou, m.val_dice);
  return buf;
}

Trainer::Trainer(ModelConfig model, ParameterStore params, TrainOptions options)
    : model_(std::move(model)), params_(std::move(params)), options_(std::move(options)) {
  model_.validate();
  options_.loss.validate();
  options_.policy.validate();
  if (options_.epochs == 0) throw Error("epochs must be at least 1");
  if (options_.batch_size == 0) throw Error("batch size must be at least 1");
  if (!(options_.lr_max > 0)) throw Error("learning rate must be positive");
}

Trainer Trainer::from_checkpoint(const Checkpoint& ckpt, TrainOptions options) {
  const auto& kv = ckpt.config;
  Trainer t(model_from_checkpoint(ckpt), params_from_checkpoint(ckpt), std::move(options));
  t.adam_.import_state(ckpt.tensors, get_u64(kv, "optim.t"));
  t.step_ = get_u64(kv, "train.step");
  t.epoch_loss_sum_ = get_double(kv, "train.epoch_loss_sum");
  t.epoch_loss_count_ = get_u64(kv, "train.epoch_loss_count");
  t.best_dice_ = get_double(kv, "train.best_val_dice");
  t.total_steps_ = get_u64(kv, "train.total_steps");
  t.steps_per_epoch_ = get_u64(kv, "train.steps_per_epoch");
  return t;
}

double Trainer::train_step(const Batch& batch, double lr) {
  Tape<float> tape;
  Binding<float> binding(tape, params_, ops::Mode::Train);
  const auto logits = forward(binding, model_, tape.constant(batch.images));
  const auto loss = jaccard_loss(batch.masks, ops::sigmoid(logits), options_.loss);
  tape.backward(loss);
  const auto grads = binding.gradients();
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericalError("non-finite gradient for " + name);
  }
  adam_.step(params_, grads, lr);
  ++step_;
  return loss.value().item();
}

std::vector<EpochMetrics> Trainer::fit(const std::vector<SegmentationSample>& train,
                                       const std::vector<SegmentationSample>& val) {
  if (train.empty()) throw DataError("training split is empty");
  const std::uint64_t spe = (train.size() + options_.batch_size - 1) / options_.batch_size;
  const std::uint64_t total = spe * options_.epochs;
  if (step_ > 0 && (spe != steps_per_epoch_ || total != total_steps_)) {
    throw Error("resumed run does not match the checkpoint's schedule (steps per epoch " +
                std::to_string(steps_per_epoch_) + ", total steps " + std::to_string(total_steps_) + ")");
  }
  steps_per_epoch_ = spe;
  total_steps_ = total;
  const ScheduleConfig schedule{options_.lr_max, options_.eta_min, total};
  const auto& val_set = val.empty() ? train : val;

  std::ofstream csv;
  if (!options_.out_dir.empty()) {
    std::filesystem::create_directories(options_.out_dir);
    const auto path = options_.out_dir / "metrics.csv";
    if (step_ == 0) {
      csv.open(path, std::ios::trunc);
      csv << kMetricsHeader << "\n";
    } else {
      csv.open(path, std::ios::app);
    }
    if (!csv) throw DataError("cannot write " + path.string());
  }

  std::vector<EpochMetrics> history;
  std::vector<std::size_t> order;
  std::uint64_t order_epoch = ~std::uint64_t{0};
  while (step_ < total) {
    if (options_.stop_after_step && step_ >= *options_.stop_after_step) break;
    const std::uint64_t epoch = step_ / spe;
    const std::uint64_t batch_index = step_ % spe;
    if (epoch != order_epoch) {
      order.resize(train.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle_rng(derive_seed(options_.seed, {0x73687566ULL, epoch}));
      shuffle_rng.shuffle(order.begin(), order.end());
      order_epoch = epoch;
    }
    if (batch_index == 0) {
      epoch_loss_sum_ = 0;
      epoch_loss_count_ = 0;
    }

    std::vector<SegmentationSample> picked;
    const std::size_t first = batch_index * options_.batch_size;
    for (std::size_t i = first; i < std::min(first + options_.batch_size, train.size()); ++i) {
      const std::size_t idx = order[i];
      if (options_.augment) {
        Rng rng(augment_seed(options_.seed, idx, epoch));
        picked.push_back(augment(train[idx], options_.policy, rng));
      } else {
        picked.push_back(train[idx]);
      }
    }

    const double lr = cosine_lr(step_, schedule);
    double loss = 0;
    try {
      loss = train_step(make_batch(picked), lr);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_index) + ", lr " + fmt_double(lr) + ")");
    }
    if (!std::isfinite(loss)) {
      throw NumericalError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch_index) + ", lr " + fmt_double(lr));
    }
    epoch_loss_sum_ += loss;
    ++epoch_loss_count_;

    if (batch_index + 1 == spe) {
      const auto report = evaluate(params_, model_, val_set, options_.threshold);
      EpochMetrics m{static_cast<std::size_t>(epoch + 1), step_, lr,
                     epoch_loss_sum_ / static_cast<double>(epoch_loss_count_), report.mean_iou(), report.mean_dice()};
      history.push_back(m);
      if (options_.verbose) std::cerr << format_metrics_row(m) << "\n";
      if (csv.is_open()) csv << format_metrics_row(m) << "\n" << std::flush;
      const bool best = m.val_dice > best_dice_;
      if (best) best_dice_ = m.val_dice;
      if (!options_.out_dir.empty()) {
        const auto ckpt = checkpoint();
        if (best) save_checkpoint(options_.out_dir / "best.ckpt", ckpt);
        save_checkpoint(options_.out_dir / "last.ckpt", ckpt);
      }
    }
  }
  if (!options_.out_dir.empty()) save_checkpoint(options_.out_dir / "last.ckpt", checkpoint());
  return history;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.config = options_.run_config;
  for (auto& [k, v] : model_.to_key_values()) ckpt.config[k] = v;
  ckpt.config["train.step"] = std::to_string(step_);
  ckpt.config["train.steps_per_epoch"] = std::to_string(steps_per_epoch_);
  ckpt.config["train.total_steps"] = std::to_string(total_steps_);
  ckpt.config["train.epoch_loss_sum"] = fmt_double(epoch_loss_sum_);
  ckpt.config["train.epoch_loss_count"] = std::to_string(epoch_loss_count_);
  ckpt.config["train.best_val_dice"] = fmt_double(best_dice_);
  ckpt.config["optim.t"] = std::to_string(adam_.steps());
  for (const auto& e : params_.entries()) ckpt.tensors.emplace_back(e.name, e.value);
  for (auto& t : adam_.export_state()) ckpt.tensors.push_back(std::move(t));
  return ckpt;
}

EvalReport evaluate(ParameterStore& params, const ModelConfig& model, const std::vector<SegmentationSample>& samples,
                    double threshold, std::size_t batch_size) {
  EvalReport report;
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    const std::size_t last = std::min(first + batch_size, samples.size());
    std::vector<SegmentationSample> chunk(samples.begin() + static_cast<long>(first),
                                          samples.begin() + static_cast<long>(last));
    const Batch batch = make_batch(chunk);
    const Tensor pred = predict_mask(params, model, batch.images, threshold);
    const std::size_t h = batch.masks.dim(2), w = batch.masks.dim(3);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Tensor p({1, h, w}, std::vector<float>(pred.raw() + i * h * w, pred.raw() + (i + 1) * h * w));
      report.add(chunk[i].id, p, chunk[i].mask);
    }
  }
  return report;
}

ModelConfig model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = ModelConfig::from_key_values(ckpt.config);
  model.validate();
  return model;
}

ParameterStore params_from_checkpoint(const Checkpoint& ckpt) {
  const auto model = model_from_checkpoint(ckpt);
  ParameterStore store = materialize<float>(model_specs(model), 0);
  for (auto& e : store.entries()) {
    const Tensor* t = ckpt.find(e.name);
    if (!t) throw DataError("checkpoint is missing tensor " + e.name);
    if (t->shape() != e.value.shape()) {
      throw DataError("checkpoint tensor " + e.name + " has shape " + shape_str(t->shape()) + ", expected " +
                      shape_str(e.value.shape()));
    }
    e.value = *t;
  }
  return store;
}

}  // namespace pefnet
