#include "pefnet/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <vector>

namespace pefnet {

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw DataError(key + ": expected true or false, got '" + v + "'");
}

SplitSpec parse_split(const std::string& key, const std::string& v, std::uint64_t seed) {
  std::vector<double> parts;
  std::size_t pos = 0;
  while (pos <= v.size()) {
    const auto comma = std::min(v.find(',', pos), v.size());
    parts.push_back(parse_double(key, v.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  if (parts.size() != 3) throw DataError(key + ": expected three comma-separated fractions, got '" + v + "'");
  return SplitSpec{parts[0], parts[1], parts[2], seed};
}

struct Field {
  const char* key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Field number(const char* key, T& target) {
  if constexpr (std::is_same_v<T, double>) {
    return {key, [key, &target](const std::string& v) { target = parse_double(key, v); },
            [&target] { return fmt(target); }};
  } else if constexpr (std::is_same_v<T, int>) {
    return {key, [key, &target](const std::string& v) { target = static_cast<int>(parse_uint(key, v)); },
            [&target] { return std::to_string(target); }};
  } else {
    return {key, [key, &target](const std::string& v) { target = static_cast<T>(parse_uint(key, v)); },
            [&target] { return std::to_string(target); }};
  }
}

Field flag(const char* key, bool& target) {
  return {key, [key, &target](const std::string& v) { target = parse_flag(key, v); },
          [&target] { return std::string(target ? "true" : "false"); }};
}

std::vector<Field> fields(RunConfig& c) {
  auto& p = c.policy;
  return {
      {"data.dir", [&c](const std::string& v) { c.data_dir = v; }, [&c] { return c.data_dir; }},
      number("data.synth", c.synth),
      number("data.img_size", c.img_size),
      {"data.split", [&c](const std::string& v) { c.split = parse_split("data.split", v, c.split.seed); },
       [&c] { return fmt(c.split.train) + "," + fmt(c.split.val) + "," + fmt(c.split.test); }},
      number("train.epochs", c.epochs),
      number("train.batch_size", c.batch_size),
      number("train.lr", c.lr),
      number("train.eta_min", c.eta_min),
      number("train.seed", c.seed),
      number("train.threshold", c.threshold),
      flag("train.augment", c.augment),
      number("loss.alpha", c.loss.alpha),
      flag("loss.per_image", c.loss.per_image),
      number("aug.p_center_crop", p.p_center_crop),
      number("aug.crop_min", p.crop_min),
      number("aug.crop_max", p.crop_max),
      number("aug.p_rotate", p.p_rotate),
      number("aug.max_angle_deg", p.max_angle_deg),
      number("aug.p_grid_distort", p.p_grid_distort),
      number("aug.grid_cells", p.grid_cells),
      number("aug.grid_limit", p.grid_limit),
      number("aug.p_cutout", p.p_cutout),
      number("aug.cutout_min_holes", p.cutout_min_holes),
      number("aug.cutout_max_holes", p.cutout_max_holes),
      number("aug.cutout_min_side", p.cutout_min_side),
      number("aug.cutout_max_side", p.cutout_max_side),
      number("aug.p_hflip", p.p_hflip),
      number("aug.p_vflip", p.p_vflip),
  };
}

// Written into checkpoints by the trainer; never part of a run's settings.
bool is_progress_key(const std::string& k) {
  return k == "train.step" || k == "train.steps_per_epoch" || k == "train.total_steps" ||
         k == "train.epoch_loss_sum" || k == "train.epoch_loss_count" || k == "train.best_val_dice" || k == "optim.t";
}

}  // namespace

RunConfig RunConfig::from_key_values(const KeyValues& kv, bool strict) {
  RunConfig c;
  c.model = ModelConfig::from_key_values(kv);
  auto table = fields(c);
  for (const auto& [key, value] : kv) {
    if (key.rfind("model.", 0) == 0) {
      if (strict && !ModelConfig{}.to_key_values().count(key)) throw DataError("unknown config key '" + key + "'");
      continue;
    }
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end()) {
      if (strict && !is_progress_key(key)) throw DataError("unknown config key '" + key + "'");
      continue;
    }
    it->set(value);
  }
  c.split.seed = c.seed;
  return c;
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv = model.to_key_values();
  RunConfig copy = *this;
  for (const auto& f : fields(copy)) kv[f.key] = f.get();
  return kv;
}

void RunConfig::validate() const {
  model.validate();
  if (img_size == 0 || img_size % kNetworkStride != 0) {
    throw ShapeError("image size " + std::to_string(img_size) + " must be a positive multiple of 32 (input H,W must be divisible by 32)");
  }
  split.validate();
  loss.validate();
  policy.validate();
  if (epochs == 0) throw Error("epochs must be at least 1");
  if (batch_size == 0) throw Error("batch size must be at least 1");
  if (!(lr > 0)) throw Error("learning rate must be positive");
  if (!(eta_min >= 0 && eta_min <= lr)) throw Error("eta_min must lie in [0, lr]");
  if (!(threshold > 0 && threshold < 1)) throw Error("threshold must lie in (0, 1)");
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = batch_size;
  o.lr_max = lr;
  o.eta_min = eta_min;
  o.loss = loss;
  o.augment = augment;
  o.policy = policy;
  o.threshold = threshold;
  o.seed = seed;
  for (auto& [k, v] : to_key_values()) {
    if (k.rfind("model.", 0) != 0) o.run_config[k] = v;
  }
  return o;
}

}  // namespace pefnet
