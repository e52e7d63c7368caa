#include "metadet/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace metadet {

void ParamStore::add(const std::string& name, Tensor t) {
  if (name.empty()) throw std::invalid_argument("ParamStore: empty name");
  if (!tensors.emplace(name, std::move(t)).second)
    throw std::invalid_argument("ParamStore: duplicate parameter " + name);
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("ParamStore: no parameter " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("ParamStore: no parameter " + name);
  return it->second;
}

std::map<std::string, DTensor> ParamStore::as_double() const {
  std::map<std::string, DTensor> out;
  for (const auto& [name, t] : tensors) out.emplace(name, t.cast<double>());
  return out;
}

void Sgd::step(ParamStore& params, const GradMap& grads, const SgdConfig& cfg) {
  if (cfg.lr <= 0) throw std::invalid_argument("sgd_step: lr must be positive");
  if (cfg.momentum < 0 || cfg.weight_decay < 0)
    throw std::invalid_argument("sgd_step: negative momentum or weight decay");
  for (const auto& [name, g] : grads) {
    Tensor& theta = params.at(name);
    if (!g.same_shape(theta))
      throw std::invalid_argument("sgd_step: gradient shape mismatch for " + name);
    if (!g.all_finite())
      throw std::runtime_error("sgd_step: non-finite gradient for " + name);
    auto [it, fresh] = velocity_.try_emplace(name, Tensor::zeros(theta.shape));
    Tensor& v = it->second;
    (void)fresh;
    const float m = float(cfg.momentum);
    const float wd = float(cfg.weight_decay);
    const float lr = float(cfg.lr);
    for (int64_t i = 0; i < theta.size(); ++i) {
      v[i] = m * v[i] + g[i] + wd * theta[i];
      theta[i] -= lr * v[i];
    }
    if (!theta.all_finite())
      throw std::runtime_error("sgd_step: parameter " + name + " became non-finite");
  }
}

}  // namespace metadet
