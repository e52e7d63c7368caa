#pragma once

#include <map>
#include <string>
#include <vector>

#include "metadet/detection.hpp"
#include "metadet/meta_rpn.hpp"
#include "metadet/training.hpp"

namespace metadet {

struct GtBox {
  int image_id = 0;
  int class_id = 0;
  Box box;
};

struct EvalDetection {
  int image_id = 0;
  int class_id = 0;
  Box box;
  double score = 0;
};

// proposals[class][image], score-descending within each list.
using ProposalMap = std::map<int, std::map<int, std::vector<Proposal>>>;

// Average recall at each proposal budget: ground-truth boxes matched
// one-to-one (greedy highest-IoU-first) by the top-k proposals, averaged
// over IoU thresholds 0.50:0.05:0.95, then images with that class, then
// classes. Classes absent from the ground truth are skipped.
struct ArReport {
  std::map<int, std::map<int, double>> per_class;  // class -> budget -> AR
  std::map<int, double> mean;                      // budget -> mean AR
};
ArReport eval_ar(const ProposalMap& proposals, const std::vector<GtBox>& gts,
                 const std::vector<int>& k_list);

// COCO-style average precision: per class and IoU threshold, detections are
// matched score-descending (ties: lower image id, earlier input) to the
// best unmatched ground truth of the same image; precision-recall is
// integrated at 101 interpolated recall points; AP averages thresholds
// 0.50:0.05:0.95, AP50/AP75 report the single thresholds.
struct ApReport {
  std::map<int, double> ap, ap50, ap75;  // per class present in the gts
  double mean_ap = 0, mean_ap50 = 0, mean_ap75 = 0;
};
ApReport eval_ap(const std::vector<EvalDetection>& dets, const std::vector<GtBox>& gts);

// Few-shot inference over one image: per enrolled class, prototype-
// conditioned proposals, pairwise classification of each proposal, decode,
// threshold, class-internal NMS; the merged list is globally sorted and
// capped. per_class keeps each class's full (uncapped-by-merge) result, so
// enrolling additional classes provably never changes it. Inference only —
// parameters are read, never written.
struct MetaDetections {
  std::vector<Detection> merged;
  std::map<int, std::vector<Detection>> per_class;
  double proposal_s = 0;  // stage-one + proposal generation wall clock
  double classify_s = 0;  // roi extraction + pairwise scoring wall clock
};
MetaDetections meta_test_detect(const ParamStore& params, const ModelConfig& mc,
                                const Tensor& image,
                                const std::vector<ClassPrototype>& protos);

// Per-class prototype-conditioned proposals for one image (inference mode).
std::vector<Proposal> class_proposals(const ParamStore& params, const ModelConfig& mc,
                                      const Tensor& image, const ClassPrototype& proto);

// Evaluation report serialization:
// {"per_class": {"<id>": {"name":…, "AP":…, "AP50":…, "AP75":…, "AR@k": {…}}},
//  "mean": {"AP":…, "AP50":…, "AP75":…, "AR@k": {…}}, "timing_s": {…}}
struct EvalReport {
  std::map<int, std::string> class_names;
  std::map<int, std::map<std::string, double>> per_class;  // metric -> value
  std::map<int, std::map<int, double>> per_class_ar;       // class -> budget
  std::map<std::string, double> mean;
  std::map<int, double> mean_ar;  // budget -> AR
  std::map<std::string, double> timing_s;
};
std::string eval_report_json(const EvalReport& report);
void write_eval_report(const EvalReport& report, const std::string& path);

// JSON array of {image_id, class_id, bbox:[x1,y1,x2,y2], score} in input
// order (callers sort by image id for deterministic merges).
void write_detections_json(const std::vector<EvalDetection>& dets, const std::string& path);

// CSV dump "image_id,class_id,x1,y1,x2,y2,score", proposals in list order.
void write_proposals_csv(const ProposalMap& proposals, const std::string& path);

}  // namespace metadet
