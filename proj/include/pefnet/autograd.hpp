#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pefnet/tensor.hpp"

namespace pefnet {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Gradient after Tape::backward; zeros if the value did not influence the loss.
  BasicTensor<T> grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient record. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted. One tape per forward/backward pass.
template <typename T>
class Tape {
 public:
  /// Propagates grad_out (the gradient of the node's output) into the inputs
  /// via Tape::accumulate.
  using BackwardFn = std::function<void(Tape& tape, const BasicTensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(BasicTensor<T> value, bool requires_grad = false);
  Var<T> constant(BasicTensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. Throws NumericalError if value holds NaN/Inf.
  /// The backward rule is dropped when no input requires a gradient.
  Var<T> record(const char* op, BasicTensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward);

  /// Computes d loss / d node for every node. Gradients from a previous call are
  /// discarded first; repeated calls return the same result rather than accumulating.
  void backward(const Var<T>& loss);

  /// Adds g into the gradient buffer of v (no-op when v does not require a gradient).
  void accumulate(const Var<T>& v, const BasicTensor<T>& g);
  /// Mutable gradient buffer of v, allocated as zeros on first use.
  BasicTensor<T>& grad_buffer(const Var<T>& v);

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  BasicTensor<T> grad(std::size_t id) const;
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool has_gradients() const noexcept { return !grads_.empty(); }

 private:
  struct Node {
    std::string op;
    BasicTensor<T> value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  bool owns(const Var<T>& v) const noexcept { return v.tape() == this && v.id() < nodes_.size(); }

  std::vector<Node> nodes_;
  std::vector<BasicTensor<T>> grads_;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename T>
BasicTensor<T> Var<T>::grad() const {
  return tape_->grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace pefnet
