#pragma once

#include <string>
#include <vector>

#include "metadet/backbone.hpp"
#include "metadet/binder.hpp"
#include "metadet/geometry.hpp"
#include "metadet/optim.hpp"

namespace metadet {

// Fine-grained pairwise matcher between a proposal's RoI features and a class
// prototype: affinity over flattened spatial positions, row-softmax
// alignment of the prototype onto the proposal, a foreground attention mask
// from affinity row masses, gamma-gated residuals (exact identity at init),
// then a three-branch conv network pooled into one match logit + 4 deltas.
struct MetaClassifierConfig {
  int roi_size = 7;       // H' = W'
  int roi_samples = 2;    // bilinear sample points per bin axis (2x2 default)
  bool use_alignment = true;     // affinity + aligned prototype (+ residual)
  bool use_fg_attention = true;  // foreground mask gating of both sides
  bool cosine_affinity = false;  // unit-normalize embeddings before the dot
  bool use_mult = true;          // pairwise branches, ablatable independently
  bool use_sub = true;
  bool use_cat = true;
  int psi_layers = 3;

  double score_threshold = 0.05;  // final detection filtering
  double nms_iou = 0.5;
  int max_detections = 100;
  double delta_clamp = 6.0;
};

void init_meta_classifier(ParamStore& params, const MetaClassifierConfig& cfg, int channels,
                          Rng& rng);

// RoI bilinear pooling of a stride-S stage-one map to roi_size x roi_size
// (samples^2 points per bin, averaged, border-clamped). Box in image pixels;
// it is clipped to the map extent and must not be degenerate afterwards.
template <typename T>
VarT<T> roi_pool_graph(TapeT<T>& tape, VarT<T> stage1_map, const Box& box, int stride,
                       const MetaClassifierConfig& cfg);

// RoI pooling followed by the stage-two convs: the proposal-side feature.
template <typename T>
VarT<T> roi_extract_graph(Binder<T>& b, VarT<T> stage1_map, const Box& box, int stride,
                          const BackboneConfig& bb, const MetaClassifierConfig& cfg);

// Prototype-side feature: the averaged support map pooled over its full
// extent to roi_size, then stage two — computed once per class.
template <typename T>
VarT<T> prototype_head_graph(Binder<T>& b, VarT<T> f_c, int stride, const BackboneConfig& bb,
                             const MetaClassifierConfig& cfg);

template <typename T>
struct PairOut {
  VarT<T> logit;   // {1} match logit (sigmoid gives the score)
  VarT<T> deltas;  // {4} box regression relative to the proposal
};

// Intermediate alignment variables, exposed for tests and visualization.
// Vars are invalid when the corresponding stage is ablated away.
template <typename T>
struct PairVars {
  VarT<T> affinity;   // {n,n}, n = roi_size^2
  VarT<T> a_norm;     // {n,n} row-stochastic
  VarT<T> f_bar;      // {H',W',C'} aligned prototype
  VarT<T> mask;       // {H',W'}
  VarT<T> f_tilde_c;  // {H',W',C'} head input, prototype side (always set)
  VarT<T> f_tilde_p;  // {H',W',C'} head input, proposal side (always set)
};

template <typename T>
PairOut<T> classify_pair_graph(Binder<T>& b, VarT<T> f_p, VarT<T> f_hat_c,
                               const MetaClassifierConfig& cfg, PairVars<T>* expose = nullptr);

// Plain-tensor snapshot of the alignment pipeline for one pair.
struct AlignmentState {
  Tensor affinity;  // {n,n}
  Tensor a_norm;    // {n,n}
  Tensor f_bar_c;   // {H',W',C'}
  Tensor mask;      // {H',W'}
  float gamma1 = 0;
  float gamma2 = 0;
};

struct PairResult {
  double score = 0;  // in (0,1)
  Delta delta;
};

// Inference-mode scoring of one (proposal feature, prototype feature) pair.
PairResult classify_pair(const ParamStore& params, const MetaClassifierConfig& cfg,
                         const Tensor& f_p, const Tensor& f_hat_c,
                         AlignmentState* state = nullptr);

// Inference-mode prototype head over a plain prototype map.
Tensor prototype_head(const ParamStore& params, const BackboneConfig& bb,
                      const MetaClassifierConfig& cfg, const Tensor& f_c, int stride);

// Inference-mode RoI feature for one proposal box.
Tensor roi_extract(const ParamStore& params, const BackboneConfig& bb,
                   const MetaClassifierConfig& cfg, const Tensor& stage1_map, const Box& box,
                   int stride);

// Renders a_norm ({n,n}) and mask ({H',W'}) as PGM heatmaps.
void export_alignment(const AlignmentState& state, const std::string& anorm_path,
                      const std::string& mask_path);

}  // namespace metadet
