#pragma once

#include <map>
#include <string>
#include <vector>

#include "metadet/tape.hpp"

namespace metadet {

// Lazily binds named parameter tensors onto a tape. Each name is bound once;
// repeated lookups return the same Var, so every use of a weight shares one
// gradient accumulator. Names under a frozen prefix bind as plain inputs:
// they take part in the forward pass but receive no gradient, which is how
// training steps freeze the backbone.
template <typename T>
class Binder {
 public:
  Binder(TapeT<T>& tape, const std::map<std::string, TensorT<T>>& values,
         std::vector<std::string> frozen_prefixes = {})
      : tape_(tape), values_(values), frozen_(std::move(frozen_prefixes)) {}

  VarT<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto vt = values_.find(name);
    if (vt == values_.end()) throw std::out_of_range("binder: unknown parameter " + name);
    VarT<T> v = is_frozen(name) ? tape_.input(vt->second) : tape_.param(vt->second);
    bound_.emplace(name, v);
    return v;
  }

  // Gradients of every trainable parameter touched by the graph. Call after
  // tape.backward(); parameters bound but unreached by the sweep report zero.
  std::map<std::string, TensorT<T>> grads() const {
    std::map<std::string, TensorT<T>> out;
    for (const auto& [name, var] : bound_)
      if (tape_.needs_grad(var)) out[name] = tape_.grad(var);
    return out;
  }

  TapeT<T>& tape() { return tape_; }

 private:
  bool is_frozen(const std::string& name) const {
    for (const auto& p : frozen_)
      if (name.rfind(p, 0) == 0) return true;
    return false;
  }

  TapeT<T>& tape_;
  const std::map<std::string, TensorT<T>>& values_;
  std::vector<std::string> frozen_;
  std::map<std::string, VarT<T>> bound_;
};

using FBinder = Binder<float>;
using DBinder = Binder<double>;

}  // namespace metadet
