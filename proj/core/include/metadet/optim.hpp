#pragma once

#include <map>
#include <string>

#include "metadet/tensor.hpp"
#include "metadet/util.hpp"

namespace metadet {

// Named model parameters. std::map keeps iteration order deterministic,
// which checkpointing, SGD, and gradient reduction all rely on.
struct ParamStore {
  std::map<std::string, Tensor> tensors;

  void add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  size_t size() const { return tensors.size(); }

  std::map<std::string, DTensor> as_double() const;
};

using GradMap = std::map<std::string, Tensor>;

struct SgdConfig {
  double lr = 0.004;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// SGD with momentum and L2 weight decay folded into the velocity:
//   v <- momentum * v + g + weight_decay * theta
//   theta <- theta - lr * v
// Velocities start at zero and persist across steps per parameter name.
// Only names present in the gradient map are touched (frozen parameters are
// simply never given gradients).
class Sgd {
 public:
  void step(ParamStore& params, const GradMap& grads, const SgdConfig& cfg);

 private:
  std::map<std::string, Tensor> velocity_;
};

}  // namespace metadet
