#include "pefnet/params.hpp"

#include "pefnet/rng.hpp"

namespace pefnet {

void declare_batch_norm(ParamSpecs& specs, const std::string& prefix, std::size_t c) {
  specs.push_back({prefix + ".gamma", {c}, Init::Ones, true});
  specs.push_back({prefix + ".beta", {c}, Init::Zeros, true});
  specs.push_back({prefix + ".running_mean", {c}, Init::Zeros, false});
  specs.push_back({prefix + ".running_var", {c}, Init::Ones, false});
  specs.push_back({prefix + ".num_batches", {1}, Init::Zeros, false});
}

void declare_layer_norm(ParamSpecs& specs, const std::string& prefix, std::size_t c) {
  specs.push_back({prefix + ".gamma", {c}, Init::Ones, true});
  specs.push_back({prefix + ".beta", {c}, Init::Zeros, true});
}

template <typename T>
void BasicParameterStore<T>::add(std::string name, BasicTensor<T> value, bool trainable) {
  if (index_.count(name)) throw Error("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{std::move(name), std::move(value), trainable});
}

template <typename T>
std::size_t BasicParameterStore<T>::lookup(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

template <typename T>
BasicTensor<T>& BasicParameterStore<T>::at(const std::string& name) {
  return entries_[lookup(name)].value;
}

template <typename T>
const BasicTensor<T>& BasicParameterStore<T>::at(const std::string& name) const {
  return entries_[lookup(name)].value;
}

template <typename T>
std::size_t BasicParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.value.numel();
  return n;
}

template <typename T>
BasicParameterStore<T> materialize(const ParamSpecs& specs, std::uint64_t seed) {
  BasicParameterStore<T> store;
  Rng rng(seed);
  for (const auto& s : specs) {
    BasicTensor<T> t(s.shape);
    switch (s.init) {
      case Init::TruncNormal:
        for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(0.02));
        break;
      case Init::Zeros:
        break;
      case Init::Ones:
        t.fill(T(1));
        break;
      case Init::LayerScale:
        t.fill(static_cast<T>(1e-6));
        break;
    }
    store.add(s.name, std::move(t), s.trainable);
  }
  return store;
}

template <typename T>
Var<T> Binding<T>::param(const std::string& name) {
  if (auto it = vars_.find(name); it != vars_.end()) return it->second;
  const bool grad = requires_grad_ && store_.trainable(name);
  Var<T> v = tape_.leaf(store_.at(name), grad);
  vars_.emplace(name, v);
  return v;
}

template <typename T>
ops::RunningStats<T> Binding<T>::running_stats(const std::string& prefix) {
  return ops::RunningStats<T>{store_.at(prefix + ".running_mean"), store_.at(prefix + ".running_var"),
                              store_.at(prefix + ".num_batches")};
}

template <typename T>
std::map<std::string, BasicTensor<T>> Binding<T>::gradients() const {
  std::map<std::string, BasicTensor<T>> out;
  for (const auto& e : store_.entries()) {
    if (!e.trainable) continue;
    auto it = vars_.find(e.name);
    out.emplace(e.name, it == vars_.end() ? BasicTensor<T>::zeros(e.value.shape()) : it->second.grad());
  }
  return out;
}

template class BasicParameterStore<float>;
template class BasicParameterStore<double>;
template class Binding<float>;
template class Binding<double>;
template BasicParameterStore<float> materialize<float>(const ParamSpecs&, std::uint64_t);
template BasicParameterStore<double> materialize<double>(const ParamSpecs&, std::uint64_t);

}  // namespace pefnet
