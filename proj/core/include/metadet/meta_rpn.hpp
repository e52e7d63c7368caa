#pragma once

#include <vector>

#include "metadet/backbone.hpp"
#include "metadet/binder.hpp"
#include "metadet/geometry.hpp"
#include "metadet/optim.hpp"

namespace metadet {

// Prototype-conditioned proposal head. The query map is passed through a
// shared 3x3 anchor-feature conv, fused with the class's pooled prototype
// through three parallel branches (product, difference, concatenation — each
// a 1x1 conv + ReLU), then scored per anchor: one sigmoid objectness logit
// and 4 box deltas per (ratio, scale).
struct MetaRpnConfig {
  int branch_channels = 0;  // per-branch output width; 0 means the input C
  bool use_mult = true;     // each branch can be ablated independently
  bool use_sub = true;
  bool use_cat = true;
  // The product branch can be switched to consume f_q - f_pool instead of
  // f_q * f_pool, mirroring the two readings of the fusion definition.
  bool mult_literal_sub = false;

  AnchorSpec anchors{{12.0, 24.0, 40.0}, {0.5, 1.0, 2.0}, 8};
  int pre_nms_k = 300;
  double nms_iou = 0.7;
  int post_nms_k = 100;
  double delta_clamp = 6.0;  // |t| cap before decoding, guards exp overflow

  int anchors_per_cell() const {
    return int(anchors.ratios.size() * anchors.scales.size());
  }
  int fused_channels(int c) const {
    int cf = branch_channels > 0 ? branch_channels : c;
    return cf * (int(use_mult) + int(use_sub) + int(use_cat));
  }
};

void init_meta_rpn(ParamStore& params, const MetaRpnConfig& cfg, int in_channels, Rng& rng);

// Eq-style fusion on an already anchor-conv'ed map. f_pool must match f_q's
// channel count; output is {H,W,k*C_f} for k enabled branches in the fixed
// order mult, sub, cat.
template <typename T>
VarT<T> fuse_features(Binder<T>& b, VarT<T> f_q, VarT<T> f_pool, const MetaRpnConfig& cfg);

template <typename T>
struct RpnOut {
  VarT<T> logits;  // {H,W,A}: objectness logit per anchor a = r*S + s
  VarT<T> deltas;  // {H,W,4A}: box deltas in channels 4a..4a+3
};

template <typename T>
RpnOut<T> meta_rpn_forward(Binder<T>& b, VarT<T> query_map, VarT<T> f_pool,
                           const MetaRpnConfig& cfg);

// Minimal depth-wise reweighting baseline: anchor features multiplied by the
// pooled prototype (a 1x1 depth-wise kernel), then linear heads. Kept as a
// structural comparison point for proposal-recall tables, not a faithful
// replica of any published system.
void init_attn_rpn(ParamStore& params, const MetaRpnConfig& cfg, int in_channels, Rng& rng);
template <typename T>
RpnOut<T> attn_rpn_forward(Binder<T>& b, VarT<T> query_map, VarT<T> f_pool,
                           const MetaRpnConfig& cfg);

struct Proposal {
  Box box;
  double score = 0;
};

// Shared anchor-to-proposal selection: per-anchor sigmoid scores, top
// pre_nms_k, clamped-delta decode, clip to the image, greedy NMS, top
// post_nms_k. Scores come back strictly descending-or-equal with
// deterministic low-index tie-breaks.
std::vector<Proposal> select_proposals(const Tensor& logits, const Tensor& deltas,
                                       const std::vector<Box>& anchors, int img_w, int img_h,
                                       const MetaRpnConfig& cfg);

// Objectness + box-regression loss over hand-picked anchors: binary
// cross-entropy on the logits gathered at the positive then negative anchor
// indices, plus smooth-L1 between the positives' predicted deltas and their
// encoded targets, averaged over positives. Works for any RpnOut producer;
// an empty positive set drops the box term entirely.
template <typename T>
VarT<T> rpn_loss_graph(TapeT<T>& tape, const RpnOut<T>& out, const std::vector<int64_t>& pos,
                       const std::vector<int64_t>& neg, const std::vector<Delta>& pos_targets,
                       double beta = 1.0);

// Inference-mode, per-class proposal generation from a query feature map.
std::vector<Proposal> generate_proposals(const ParamStore& params, const MetaRpnConfig& cfg,
                                         const Tensor& query_map, const ClassPrototype& proto,
                                         int img_w, int img_h);
std::vector<Proposal> generate_proposals_attn(const ParamStore& params, const MetaRpnConfig& cfg,
                                              const Tensor& query_map, const ClassPrototype& proto,
                                              int img_w, int img_h);

}  // namespace metadet
