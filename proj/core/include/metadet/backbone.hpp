#pragma once

#include <string>
#include <vector>

#include "metadet/binder.hpp"
#include "metadet/geometry.hpp"
#include "metadet/optim.hpp"
#include "metadet/util.hpp"

namespace metadet {

struct ConvSpec {
  int channels = 0;
  int stride = 1;
};

// Two-stage extractor. Stage one maps the RGB image to the query feature
// grid; stage two is the late block applied to pooled RoI features (and to
// prototype maps) before classification.
struct BackboneConfig {
  std::vector<ConvSpec> stage1 = {{16, 2}, {32, 2}, {32, 2}};  // 3x3 convs
  std::vector<int> stage2 = {64, 64};                          // 3x3, stride 1

  int total_stride() const {
    int s = 1;
    for (const auto& l : stage1) s *= l.stride;
    return s;
  }
  int stage1_channels() const { return stage1.back().channels; }
  int stage2_channels() const { return stage2.empty() ? stage1_channels() : stage2.back(); }
};

// Registers backbone.s1.<i>.{w,b} / backbone.s2.<i>.{w,b} with He-normal
// weights and zero biases.
void init_backbone(ParamStore& params, const BackboneConfig& cfg, Rng& rng);

// Stage-one graph: image {H,W,3} -> {H/stride, W/stride, C}. Image extents
// must be divisible by the total stride.
template <typename T>
VarT<T> backbone_stage1(Binder<T>& b, VarT<T> image, const BackboneConfig& cfg);

// Stage-two graph over a pooled RoI (or prototype) map, spatial size kept.
template <typename T>
VarT<T> backbone_stage2(Binder<T>& b, VarT<T> feat, const BackboneConfig& cfg);

struct SupportExample {
  Tensor image;  // {H,W,3} in [0,1]
  Box box;       // within image bounds
  int class_id = 0;
};

// Enlarges box about its center by context_factor, clips to the image,
// crops, and bilinearly resizes to out_size x out_size (pixel-center
// convention: an integer-aligned box with factor 1 and matching out_size is
// an exact pixel copy). Throws if the clipped box has zero area.
Tensor crop_support(const Tensor& image, const Box& box, double context_factor, int out_size);

struct ClassPrototype {
  int class_id = 0;
  Tensor f_c;     // {H,W,C} mean stage-one features over the K supports
  Tensor f_pool;  // {C} spatial mean of f_c
};

// Prototype construction as a differentiable graph: crops are stage-one
// encoded, averaged over K, then spatially pooled.
template <typename T>
struct PrototypeVars {
  VarT<T> f_c;
  VarT<T> f_pool;
};
template <typename T>
PrototypeVars<T> prototype_graph(Binder<T>& b, const std::vector<TensorT<T>>& crops,
                                 const BackboneConfig& cfg);

// Inference-mode convenience over plain tensors.
ClassPrototype compute_prototype(const ParamStore& params, const BackboneConfig& cfg,
                                 const std::vector<SupportExample>& supports,
                                 double context_factor, int out_size);

}  // namespace metadet
