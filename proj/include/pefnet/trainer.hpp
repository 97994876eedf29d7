#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pefnet/augment.hpp"
#include "pefnet/checkpoint.hpp"
#include "pefnet/data.hpp"
#include "pefnet/loss.hpp"
#include "pefnet/network.hpp"
#include "pefnet/optim.hpp"

namespace pefnet {

struct TrainOptions {
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double lr_max = 1e-4;
  double eta_min = 0.0;
  LossConfig loss;
  bool augment = true;
  AugmentationPolicy policy;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  /// Directory for metrics.csv, last.ckpt and best.ckpt; empty writes nothing.
  std::filesystem::path out_dir;
  /// Stop once this global step is reached (the schedule still spans all epochs).
  std::optional<std::uint64_t> stop_after_step;
  /// Extra `key = value` pairs copied into every checkpoint's config block.
  KeyValues run_config;
  bool verbose = false;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double val_iou = 0;
  double val_dice = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,step,lr,train_loss,val_iou,val_dice";
std::string format_metrics_row(const EpochMetrics& m);

/// Mini-batch training with Adam, a single cosine cycle over all steps, and the
/// Jaccard loss on sigmoid probabilities. Batch order and augmentation are pure
/// functions of (seed, epoch, sample index), so a run resumed from a checkpoint
/// continues exactly as the uninterrupted run would have.
class Trainer {
 public:
  Trainer(ModelConfig model, ParameterStore params, TrainOptions options);

  /// Restores parameters, running statistics, optimizer moments and progress.
  static Trainer from_checkpoint(const Checkpoint& ckpt, TrainOptions options);

  /// Trains until all epochs (or stop_after_step) are done. Validation metrics
  /// fall back to the training samples when `val` is empty. Throws
  /// NumericalError naming epoch, batch and lr when the loss turns non-finite.
  std::vector<EpochMetrics> fit(const std::vector<SegmentationSample>& train,
                                const std::vector<SegmentationSample>& val);

  /// Forward, backward and one Adam update on a fixed batch. Returns the loss
  /// measured before the update.
  double train_step(const Batch& batch, double lr);

  Checkpoint checkpoint() const;

  const ModelConfig& model() const noexcept { return model_; }
  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  const Adam& optimizer() const noexcept { return adam_; }
  std::uint64_t step() const noexcept { return step_; }

 private:
  ModelConfig model_;
  ParameterStore params_;
  TrainOptions options_;
  Adam adam_;
  std::uint64_t step_ = 0;
  double epoch_loss_sum_ = 0;
  std::size_t epoch_loss_count_ = 0;
  double best_dice_ = -1;
  std::uint64_t total_steps_ = 0;
  std::uint64_t steps_per_epoch_ = 0;
};

/// Thresholded eval-mode predictions scored per sample.
EvalReport evaluate(ParameterStore& params, const ModelConfig& model, const std::vector<SegmentationSample>& samples,
                    double threshold = 0.5, std::size_t batch_size = 8);

/// Model configuration and parameters (including running statistics) stored in a checkpoint.
ModelConfig model_from_checkpoint(const Checkpoint& ckpt);
ParameterStore params_from_checkpoint(const Checkpoint& ckpt);

}  // namespace pefnet
