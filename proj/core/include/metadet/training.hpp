#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadet/backbone.hpp"
#include "metadet/base_head.hpp"
#include "metadet/episodes.hpp"
#include "metadet/meta_classifier.hpp"
#include "metadet/meta_rpn.hpp"

namespace metadet {

// Everything that fixes the network architecture, shared across training
// steps, evaluation, and checkpoints.
struct ModelConfig {
  BackboneConfig backbone;
  MetaRpnConfig rpn;
  MetaClassifierConfig cls;
  BaseHeadConfig base;
  // Proposal-stage architecture: "meta" (three-branch fusion) or
  // "attention-baseline" (depth-wise reweighting comparison head).
  std::string rpn_variant = "meta";
  double support_context = 1.2;
  int support_size = 56;  // support crop resolution; divisible by the stride
};

struct StepSchedule {
  int iterations = 200;
  double lr = 0.004;
  std::vector<double> decay_at = {0.75};  // fractions of the run; x0.1 each
  double momentum = 0.9;
  double weight_decay = 1e-4;

  double lr_at(int iter) const;
};

struct TrainConfig {
  int n_way = 2;
  int k_shot = 5;
  int n_queries = 2;
  int neg_per_pos = 3;  // 1:3 positive:negative pair budget
  int pos_cap = 16;
  int neg_floor = 16;
  double rpn_pos_iou = 0.7, rpn_neg_iou = 0.3;
  double cls_pos_iou = 0.5, cls_neg_iou = 0.5;
  bool add_gt_proposals = true;  // ground truth joins the classifier's rois
  bool finetune_base_head = false;
  double beta = 1.0;  // huber transition point
  StepSchedule step1{400, 0.004, {0.75}};
  StepSchedule step2{300, 0.001, {0.66, 0.89}};
  StepSchedule step3{200, 0.001, {0.67}};
  uint64_t seed = 1;
};

struct LossRow {
  int iteration = 0;
  double rpn = 0;
  double cls = 0;
  double total = 0;
};

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows);

// Classification-stage pair loss: mean binary cross-entropy over the pair
// logits (label 1 for matched pairs) plus smooth-L1 between each positive
// pair's deltas and its target, averaged over positives. pos_targets aligns
// with the label-1 pairs in order. Throws on an empty pair list.
template <typename T>
VarT<T> pair_loss_graph(TapeT<T>& tape, const std::vector<PairOut<T>>& pairs,
                        const std::vector<int>& labels, const std::vector<Delta>& pos_targets,
                        double beta = 1.0);

// Both episodic losses over every (query image, episode class) combination:
// proposal-stage objectness/regression on sampled anchors, and pairwise
// classification against each class prototype on sampled rois (current
// proposals, detached, plus the ground-truth boxes when configured). Each
// term is averaged over the combinations that contributed to it.
template <typename T>
struct EpisodeLosses {
  VarT<T> rpn;
  VarT<T> cls;
  VarT<T> total;
};
template <typename T>
EpisodeLosses<T> episode_loss_graph(Binder<T>& b, const Dataset& ds, const Episode& ep,
                                    const ModelConfig& mc, const TrainConfig& tc, Rng& rng);

// Detector-head loss for one image: class-agnostic objectness/regression on
// sampled anchors plus softmax/regression on sampled rois. class_to_head
// maps dataset category ids to head class indices 1..N. The rpn/cls fields
// carry the proposal and roi terms.
template <typename T>
EpisodeLosses<T> base_image_loss_graph(Binder<T>& b, const Dataset& ds, int image_id,
                                       const ModelConfig& mc, const TrainConfig& tc,
                                       const std::map<int, int>& class_to_head, Rng& rng,
                                       const std::vector<int>& allowed_anns = {});

// Step 1: episodic meta-training of backbone + proposal head + pairwise
// classifier on the base classes. Initializes any missing parameters.
std::vector<LossRow> run_step1_meta_train(const Dataset& ds, const ModelConfig& mc,
                                          const TrainConfig& tc, ParamStore& params);

// Step 2: trains the conventional detection head on the base classes with
// the backbone frozen (its bytes are unchanged). Requires step-1 parameters.
std::vector<LossRow> run_step2_base_head(const Dataset& ds, const ModelConfig& mc,
                                         const TrainConfig& tc, ParamStore& params);

// Step 3: fine-tunes the meta components on the balanced shot-k support
// lists of base + novel classes, backbone frozen; the same k examples serve
// as enrollment supports at test time. Requires step-1 parameters.
std::vector<LossRow> run_step3_finetune(const Dataset& ds, const ModelConfig& mc,
                                        const TrainConfig& tc, int k, ParamStore& params);

// Head-class mapping used by the detector head: base category ids in
// ascending order map to 1..N.
std::map<int, int> base_class_to_head(const Dataset& ds);

}  // namespace metadet
