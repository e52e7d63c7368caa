#include "metadet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <tuple>

#include "json.hpp"
#include "metadet/util.hpp"

namespace metadet {

namespace {

constexpr int kIouSteps = 10;  // 0.50:0.05:0.95

double iou_threshold(int step) { return 0.5 + 0.05 * step; }

std::vector<Proposal> variant_proposals(const ParamStore& params, const ModelConfig& mc,
                                        const Tensor& qmap, const ClassPrototype& proto,
                                        int img_w, int img_h) {
  if (mc.rpn_variant == "attention-baseline")
    return generate_proposals_attn(params, mc.rpn, qmap, proto, img_w, img_h);
  return generate_proposals(params, mc.rpn, qmap, proto, img_w, img_h);
}

// (iou, proposal index, gt index) sorted by iou desc with low-index ties:
// the deterministic pair order for greedy one-to-one matching.
std::vector<std::tuple<double, int, int>> iou_pairs(const std::vector<Box>& props,
                                                    const std::vector<Box>& gts) {
  std::vector<std::tuple<double, int, int>> pairs;
  for (int p = 0; p < int(props.size()); ++p)
    for (int g = 0; g < int(gts.size()); ++g) {
      double v = iou(props[size_t(p)], gts[size_t(g)]);
      if (v > 0) pairs.emplace_back(v, p, g);
    }
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });
  return pairs;
}

// Recall of the gts by the first top_k proposals, averaged over the IoU grid.
double average_recall(const std::vector<std::tuple<double, int, int>>& pairs, int top_k,
                      int n_props, int n_gt) {
  double acc = 0;
  for (int s = 0; s < kIouSteps; ++s) {
    double t = iou_threshold(s);
    std::vector<char> pu(size_t(n_props), 0), gu(size_t(n_gt), 0);
    int matched = 0;
    for (const auto& [v, p, g] : pairs) {
      if (v < t) break;  // sorted descending
      if (p >= top_k || pu[size_t(p)] || gu[size_t(g)]) continue;
      pu[size_t(p)] = gu[size_t(g)] = 1;
      ++matched;
    }
    acc += double(matched) / double(n_gt);
  }
  return acc / kIouSteps;
}

}  // namespace

ArReport eval_ar(const ProposalMap& proposals, const std::vector<GtBox>& gts,
                 const std::vector<int>& k_list) {
  std::map<int, std::map<int, std::vector<Box>>> gt_by;  // class -> image -> boxes
  for (const GtBox& g : gts) gt_by[g.class_id][g.image_id].push_back(g.box);

  ArReport rep;
  for (const auto& [cls, by_img] : gt_by) {
    std::map<int, double> sums;
    int n_images = 0;
    for (const auto& [img, gboxes] : by_img) {
      static const std::vector<Proposal> kNone;
      const std::vector<Proposal>* plist = &kNone;
      auto ci = proposals.find(cls);
      if (ci != proposals.end()) {
        auto ii = ci->second.find(img);
        if (ii != ci->second.end()) plist = &ii->second;
      }
      std::vector<Box> pboxes;
      pboxes.reserve(plist->size());
      for (const Proposal& p : *plist) pboxes.push_back(p.box);
      auto pairs = iou_pairs(pboxes, gboxes);
      for (int k : k_list)
        sums[k] += average_recall(pairs, k, int(pboxes.size()), int(gboxes.size()));
      ++n_images;
    }
    for (int k : k_list) rep.per_class[cls][k] = sums[k] / n_images;
  }
  for (int k : k_list) {
    double s = 0;
    for (const auto& [cls, ar] : rep.per_class) s += ar.at(k);
    rep.mean[k] = rep.per_class.empty() ? 0.0 : s / double(rep.per_class.size());
  }
  return rep;
}

ApReport eval_ap(const std::vector<EvalDetection>& dets, const std::vector<GtBox>& gts) {
  std::map<int, std::map<int, std::vector<Box>>> gt_by;  // class -> image -> boxes
  std::map<int, int> n_gt;
  for (const GtBox& g : gts) {
    gt_by[g.class_id][g.image_id].push_back(g.box);
    ++n_gt[g.class_id];
  }

  ApReport rep;
  double sum_ap = 0, sum_50 = 0, sum_75 = 0;
  for (const auto& [cls, by_img] : gt_by) {
    std::vector<int> order;
    for (int i = 0; i < int(dets.size()); ++i)
      if (dets[size_t(i)].class_id == cls) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const EvalDetection &da = dets[size_t(a)], &db = dets[size_t(b)];
      if (da.score != db.score) return da.score > db.score;
      if (da.image_id != db.image_id) return da.image_id < db.image_id;
      return a < b;
    });

    double ap_sum = 0, ap50 = 0, ap75 = 0;
    for (int s = 0; s < kIouSteps; ++s) {
      double t = iou_threshold(s);
      std::map<int, std::vector<char>> used;  // image -> per-gt matched flag
      std::vector<char> tp(order.size(), 0);
      for (size_t d = 0; d < order.size(); ++d) {
        const EvalDetection& det = dets[size_t(order[d])];
        auto gi = by_img.find(det.image_id);
        if (gi == by_img.end()) continue;  // stays a false positive
        const std::vector<Box>& gb = gi->second;
        std::vector<char>& u = used[det.image_id];
        u.resize(gb.size(), 0);
        int best = -1;
        double best_iou = 0;
        for (int g = 0; g < int(gb.size()); ++g) {
          if (u[size_t(g)]) continue;
          double v = iou(det.box, gb[size_t(g)]);
          if (v > best_iou) {
            best_iou = v;
            best = g;
          }
        }
        if (best >= 0 && best_iou >= t) {
          u[size_t(best)] = 1;
          tp[d] = 1;
        }
      }

      // Precision envelope over the ranked list, then 101-point integration.
      std::vector<double> prec(order.size()), rec(order.size());
      int cum = 0;
      for (size_t d = 0; d < order.size(); ++d) {
        cum += tp[d];
        prec[d] = double(cum) / double(d + 1);
        rec[d] = double(cum) / double(n_gt[cls]);
      }
      for (int d = int(order.size()) - 2; d >= 0; --d)
        prec[size_t(d)] = std::max(prec[size_t(d)], prec[size_t(d) + 1]);
      double ap = 0;
      for (int r = 0; r <= 100; ++r) {
        double rp = double(r) / 100.0;
        size_t d = 0;
        while (d < order.size() && rec[d] < rp) ++d;
        if (d < order.size()) ap += prec[d];
      }
      ap /= 101.0;
      ap_sum += ap;
      if (s == 0) ap50 = ap;
      if (s == 5) ap75 = ap;
    }
    rep.ap[cls] = ap_sum / kIouSteps;
    rep.ap50[cls] = ap50;
    rep.ap75[cls] = ap75;
    sum_ap += rep.ap[cls];
    sum_50 += ap50;
    sum_75 += ap75;
  }
  if (!rep.ap.empty()) {
    rep.mean_ap = sum_ap / double(rep.ap.size());
    rep.mean_ap50 = sum_50 / double(rep.ap.size());
    rep.mean_ap75 = sum_75 / double(rep.ap.size());
  }
  return rep;
}

std::vector<Proposal> class_proposals(const ParamStore& params, const ModelConfig& mc,
                                      const Tensor& image, const ClassPrototype& proto) {
  Tape tape(false);
  FBinder b(tape, params.tensors);
  const Tensor& qmap = tape.val(backbone_stage1(b, tape.input(image), mc.backbone));
  return variant_proposals(params, mc, qmap, proto, image.dim(1), image.dim(0));
}

MetaDetections meta_test_detect(const ParamStore& params, const ModelConfig& mc,
                                const Tensor& image,
                                const std::vector<ClassPrototype>& protos) {
  using clock = std::chrono::steady_clock;
  MetaDetections out;
  if (protos.empty()) return out;

  const int stride = mc.backbone.total_stride();
  const int img_h = image.dim(0), img_w = image.dim(1);

  auto t0 = clock::now();
  Tape tape(false);
  FBinder b(tape, params.tensors);
  const Tensor& qmap = tape.val(backbone_stage1(b, tape.input(image), mc.backbone));

  std::map<int, std::vector<Proposal>> props;
  for (const ClassPrototype& proto : protos)
    props[proto.class_id] = variant_proposals(params, mc, qmap, proto, img_w, img_h);
  auto t1 = clock::now();

  for (const ClassPrototype& proto : protos) {
    Tensor f_hat = prototype_head(params, mc.backbone, mc.cls, proto.f_c, stride);
    std::vector<Detection> raw;
    for (const Proposal& p : props[proto.class_id]) {
      Tensor f_p = roi_extract(params, mc.backbone, mc.cls, qmap, p.box, stride);
      PairResult r = classify_pair(params, mc.cls, f_p, f_hat);
      if (r.score < mc.cls.score_threshold) continue;
      Box box = clip_box(decode_box(r.delta, p.box), img_w, img_h);
      if (box.degenerate()) continue;
      raw.push_back(Detection{proto.class_id, r.score, box});
    }
    out.per_class[proto.class_id] = finalize_detections(
        std::move(raw), mc.cls.score_threshold, mc.cls.nms_iou, mc.cls.max_detections);
  }
  auto t2 = clock::now();

  std::vector<Detection> all;
  for (const auto& [cls, dets] : out.per_class)
    all.insert(all.end(), dets.begin(), dets.end());
  out.merged = finalize_detections(std::move(all), mc.cls.score_threshold, mc.cls.nms_iou,
                                   mc.cls.max_detections);

  out.proposal_s = std::chrono::duration<double>(t1 - t0).count();
  out.classify_s = std::chrono::duration<double>(t2 - t1).count();
  return out;
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::json j;
  j["per_class"] = nlohmann::json::object();
  for (const auto& [cls, metrics] : report.per_class) {
    nlohmann::json c;
    auto ni = report.class_names.find(cls);
    if (ni != report.class_names.end()) c["name"] = ni->second;
    for (const auto& [k, v] : metrics) c[k] = v;
    auto ai = report.per_class_ar.find(cls);
    if (ai != report.per_class_ar.end()) {
      nlohmann::json ar;
      for (const auto& [budget, v] : ai->second) ar[std::to_string(budget)] = v;
      c["AR@k"] = ar;
    }
    j["per_class"][std::to_string(cls)] = c;
  }
  nlohmann::json mean;
  for (const auto& [k, v] : report.mean) mean[k] = v;
  if (!report.mean_ar.empty()) {
    nlohmann::json ar;
    for (const auto& [budget, v] : report.mean_ar) ar[std::to_string(budget)] = v;
    mean["AR@k"] = ar;
  }
  j["mean"] = mean;
  nlohmann::json timing;
  for (const auto& [k, v] : report.timing_s) timing[k] = v;
  j["timing_s"] = timing;
  return j.dump(2) + "\n";
}

void write_eval_report(const EvalReport& report, const std::string& path) {
  write_text_file(path, eval_report_json(report));
}

void write_detections_json(const std::vector<EvalDetection>& dets, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const EvalDetection& d : dets) {
    nlohmann::json e;
    e["image_id"] = d.image_id;
    e["class_id"] = d.class_id;
    e["bbox"] = {d.box.x1, d.box.y1, d.box.x2, d.box.y2};
    e["score"] = d.score;
    arr.push_back(e);
  }
  write_text_file(path, arr.dump(2) + "\n");
}

void write_proposals_csv(const ProposalMap& proposals, const std::string& path) {
  std::string out = "image_id,class_id,x1,y1,x2,y2,score\n";
  char line[160];
  for (const auto& [cls, by_img] : proposals)
    for (const auto& [img, list] : by_img)
      for (const Proposal& p : list) {
        std::snprintf(line, sizeof line, "%d,%d,%.4f,%.4f,%.4f,%.4f,%.6f\n", img, cls, p.box.x1,
                      p.box.y1, p.box.x2, p.box.y2, p.score);
        out += line;
      }
  write_text_file(path, out);
}

}  // namespace metadet
