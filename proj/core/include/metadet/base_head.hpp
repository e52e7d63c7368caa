#pragma once

#include <vector>

#include "metadet/backbone.hpp"
#include "metadet/binder.hpp"
#include "metadet/detection.hpp"
#include "metadet/meta_classifier.hpp"
#include "metadet/meta_rpn.hpp"
#include "metadet/optim.hpp"

namespace metadet {

// Conventional two-stage detector head for the base classes, sharing the
// backbone: a class-agnostic proposal network plus a softmax classifier over
// |base classes| + 1 logits (index 0 is background) with per-class deltas.
// One proposal list is shared by every class, so its cost is independent of
// the class count.
struct BaseHeadConfig {
  AnchorSpec anchors{{12.0, 24.0, 40.0}, {0.5, 1.0, 2.0}, 8};
  int pre_nms_k = 300;
  double rpn_nms_iou = 0.7;
  int post_nms_k = 100;
  double delta_clamp = 6.0;

  int roi_size = 7;
  int roi_samples = 2;
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;

  int anchors_per_cell() const { return int(anchors.ratios.size() * anchors.scales.size()); }
  // The proposal-selection and RoI-pooling knobs in the forms the shared
  // helpers consume.
  MetaRpnConfig proposal_cfg() const;
  MetaClassifierConfig roi_cfg() const;
};

// Creates base_rpn.* and base_rcnn.* parameters. The classifier emits
// num_base_classes + 1 logits and 4 deltas per class including background.
void init_base_head(ParamStore& params, const BaseHeadConfig& cfg, const BackboneConfig& bb,
                    int num_base_classes, Rng& rng);

// Number of non-background classes a parameter store was initialized for.
int base_head_classes(const ParamStore& params);

template <typename T>
RpnOut<T> base_rpn_forward(Binder<T>& b, VarT<T> stage1_map, const BaseHeadConfig& cfg);

template <typename T>
struct RcnnOut {
  VarT<T> logits;  // {N+1}, background first
  VarT<T> deltas;  // {4(N+1)}, grouped per class
};

template <typename T>
RcnnOut<T> rcnn_forward(Binder<T>& b, VarT<T> stage1_map, const Box& proposal, int stride,
                        const BackboneConfig& bb, const BaseHeadConfig& cfg);

// Inference-mode class distribution for one proposal.
struct RoiScores {
  std::vector<double> probs;   // softmax over N+1 entries; sums to 1
  std::vector<Delta> deltas;   // one per class including background, clamped
};
RoiScores classify_roi(const ParamStore& params, const BackboneConfig& bb,
                       const BaseHeadConfig& cfg, const Tensor& stage1_map, const Box& proposal,
                       int stride);

// Class-agnostic proposals from a precomputed stage-one map.
std::vector<Proposal> generate_base_proposals(const ParamStore& params, const BaseHeadConfig& cfg,
                                              const Tensor& stage1_map, int img_w, int img_h);

// Full single-image pipeline: stage one, shared proposals, per-proposal
// classification, per-class decode + NMS, global cap. class_ids maps head
// classes to dataset category ids (head class k reports class_ids[k-1]) and
// must match the trained logit count.
std::vector<Detection> detect_base(const ParamStore& params, const BackboneConfig& bb,
                                   const BaseHeadConfig& cfg, const Tensor& image,
                                   const std::vector<int>& class_ids);

// --- training losses ------------------------------------------------------

struct RoiSample {
  Box box;
  int label = 0;  // 0 = background, 1..N = head class index
  Delta target;   // encoded against box; ignored for background rows
};

// Mean softmax cross-entropy over the sampled RoIs plus smooth-L1 between
// each positive's class-specific deltas and its target, averaged over
// positives.
template <typename T>
VarT<T> rcnn_loss_graph(Binder<T>& b, VarT<T> stage1_map, int stride, const BackboneConfig& bb,
                        const BaseHeadConfig& cfg, const std::vector<RoiSample>& rois,
                        double beta = 1.0);

}  // namespace metadet
