#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "pefnet/ops.hpp"

namespace pefnet {

/// How a named tensor is initialized by `build`.
enum class Init {
  TruncNormal,  // N(0, 0.02^2) truncated at two standard deviations
  Zeros,
  Ones,
  LayerScale,  // constant 1e-6
};

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::Zeros;
  bool trainable = true;
};

using ParamSpecs = std::vector<ParamSpec>;

/// Declares the running statistics and affine parameters of a BatchNorm over c channels.
void declare_batch_norm(ParamSpecs& specs, const std::string& prefix, std::size_t c);
void declare_layer_norm(ParamSpecs& specs, const std::string& prefix, std::size_t c);

/// Named tensors in declaration order: learnable parameters plus non-trainable
/// buffers (BatchNorm running statistics). Iteration order is deterministic.
template <typename T>
class BasicParameterStore {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> value;
    bool trainable = true;
  };

  void add(std::string name, BasicTensor<T> value, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  BasicTensor<T>& at(const std::string& name);
  const BasicTensor<T>& at(const std::string& name) const;
  bool trainable(const std::string& name) const { return entries_.at(lookup(name)).trainable; }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  /// Total number of trainable scalars.
  std::size_t parameter_count() const;

  template <typename U>
  BasicParameterStore<U> cast() const {
    BasicParameterStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    return out;
  }

  friend bool operator==(const BasicParameterStore& a, const BasicParameterStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.trainable != y.trainable || !(x.value == y.value)) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const;

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParameterStore = BasicParameterStore<float>;

/// Allocates and initializes every spec from a seeded generator.
template <typename T>
BasicParameterStore<T> materialize(const ParamSpecs& specs, std::uint64_t seed);

/// Exposes a parameter store to one forward pass on a tape. Trainable tensors
/// become gradient-carrying leaves on first use; BatchNorm running statistics
/// are handed to the op by reference and updated in train mode.
template <typename T>
class Binding {
 public:
  Binding(Tape<T>& tape, BasicParameterStore<T>& store, ops::Mode mode, bool requires_grad = true)
      : tape_(tape), store_(store), mode_(mode), requires_grad_(requires_grad) {}

  Tape<T>& tape() noexcept { return tape_; }
  ops::Mode mode() const noexcept { return mode_; }

  Var<T> param(const std::string& name);
  ops::RunningStats<T> running_stats(const std::string& prefix);

  /// Gradient of every trainable tensor after tape.backward(); zeros for
  /// parameters the pass never touched.
  std::map<std::string, BasicTensor<T>> gradients() const;
  const std::unordered_map<std::string, Var<T>>& bound() const noexcept { return vars_; }

 private:
  Tape<T>& tape_;
  BasicParameterStore<T>& store_;
  ops::Mode mode_;
  bool requires_grad_;
  std::unordered_map<std::string, Var<T>> vars_;
};

}  // namespace pefnet
