#include "pefnet/autograd.hpp"

namespace pefnet {

template <typename T>
Var<T> Tape<T>::leaf(BasicTensor<T> value, bool requires_grad) {
  if (!value.all_finite()) {
    throw NumericalError("non-finite value in leaf tensor of shape " + shape_str(value.shape()));
  }
  nodes_.push_back(Node{"leaf", std::move(value), requires_grad, {}, {}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(const char* op, BasicTensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericalError(std::string("non-finite output from ") + op + " with shape " + shape_str(value.shape()));
  }
  Node node{op, std::move(value), false, {}, {}};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (!owns(in)) {
      throw Error(std::string(op) + ": input is not recorded on this tape");
    }
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (!owns(loss)) {
    throw Error("backward: loss is not recorded on this tape");
  }
  const auto& lv = nodes_[loss.id()].value;
  if (lv.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
  }
  grads_.assign(nodes_.size(), BasicTensor<T>());
  grads_[loss.id()] = BasicTensor<T>(lv.shape(), T(1));
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || grads_[id].empty()) continue;
    // Rules read the upstream gradient by const reference while writing into
    // inputs, which always have smaller ids, so the buffer is not invalidated.
    node.backward(*this, grads_[id]);
  }
}

template <typename T>
BasicTensor<T>& Tape<T>::grad_buffer(const Var<T>& v) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  auto& g = grads_[v.id()];
  if (g.empty()) g = BasicTensor<T>::zeros(nodes_[v.id()].value.shape());
  return g;
}

template <typename T>
void Tape<T>::accumulate(const Var<T>& v, const BasicTensor<T>& g) {
  if (!nodes_[v.id()].requires_grad) return;
  auto& buf = grad_buffer(v);
  if (buf.numel() != g.numel()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                     shape_str(buf.shape()) + " for op " + nodes_[v.id()].op);
  }
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
BasicTensor<T> Tape<T>::grad(std::size_t id) const {
  const auto& value = nodes_.at(id).value;
  if (id < grads_.size() && !grads_[id].empty()) return grads_[id];
  return BasicTensor<T>::zeros(value.shape());
}

template class Tape<float>;
template class Tape<double>;

}  // namespace pefnet
