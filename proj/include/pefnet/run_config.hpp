#pragma once

#include <cstdint>
#include <string>

#include "pefnet/augment.hpp"
#include "pefnet/data.hpp"
#include "pefnet/keyvalue.hpp"
#include "pefnet/loss.hpp"
#include "pefnet/network.hpp"
#include "pefnet/trainer.hpp"

namespace pefnet {

/// Everything a CLI run depends on. Serialized as flat `key = value` text:
/// `model.*`, `data.*`, `train.*`, `loss.*` and `aug.*` keys.
struct RunConfig {
  ModelConfig model;

  std::string data_dir;
  std::size_t synth = 0;
  std::size_t img_size = 64;
  SplitSpec split;

  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double lr = 1e-4;
  double eta_min = 0.0;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  bool augment = true;
  LossConfig loss;
  AugmentationPolicy policy;

  /// Applies `kv` over the defaults. With `strict`, unknown keys are a
  /// DataError; otherwise they are skipped (checkpoints carry progress keys).
  static RunConfig from_key_values(const KeyValues& kv, bool strict = true);
  /// Every key, fully resolved.
  KeyValues to_key_values() const;
  /// ShapeError for an image size that is not a positive multiple of 32.
  void validate() const;

  TrainOptions train_options() const;
};

}  // namespace pefnet
