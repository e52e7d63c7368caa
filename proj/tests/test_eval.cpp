#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "metadet/eval.hpp"
#include "metadet/synth.hpp"

using namespace metadet;

namespace {

Box mk(double x1, double y1, double x2, double y2) { return Box{x1, y1, x2, y2}; }

Proposal prop(const Box& b, double s) { return Proposal{b, s}; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Independent recall oracle: per threshold, repeatedly scan the whole IoU
// matrix for the best remaining (proposal < k, gt) pair instead of walking a
// pre-sorted pair list. Ties resolve to the lowest proposal then gt index,
// matching the library's ordering rule.
double oracle_recall(const std::vector<Box>& props, const std::vector<Box>& gts, int top_k,
                     double thresh) {
  std::vector<char> pu(props.size(), 0), gu(gts.size(), 0);
  int matched = 0;
  for (;;) {
    double best = 0;
    int bp = -1, bg = -1;
    for (int p = 0; p < int(props.size()) && p < top_k; ++p) {
      if (pu[size_t(p)]) continue;
      for (int g = 0; g < int(gts.size()); ++g) {
        if (gu[size_t(g)]) continue;
        double v = iou(props[size_t(p)], gts[size_t(g)]);
        if (v > best) {
          best = v;
          bp = p;
          bg = g;
        }
      }
    }
    if (bp < 0 || best < thresh) break;
    pu[size_t(bp)] = gu[size_t(bg)] = 1;
    ++matched;
  }
  return double(matched) / double(gts.size());
}

ArReport oracle_ar(const ProposalMap& proposals, const std::vector<GtBox>& gts,
                   const std::vector<int>& k_list) {
  std::map<int, std::map<int, std::vector<Box>>> gt_by;
  for (const GtBox& g : gts) gt_by[g.class_id][g.image_id].push_back(g.box);
  ArReport rep;
  for (const auto& [cls, by_img] : gt_by) {
    std::map<int, double> sums;
    int n_img = 0;
    for (const auto& [img, gb] : by_img) {
      std::vector<Box> pb;
      auto ci = proposals.find(cls);
      if (ci != proposals.end()) {
        auto ii = ci->second.find(img);
        if (ii != ci->second.end())
          for (const Proposal& p : ii->second) pb.push_back(p.box);
      }
      for (int k : k_list) {
        double acc = 0;
        for (int s = 0; s < 10; ++s) acc += oracle_recall(pb, gb, k, 0.5 + 0.05 * s);
        sums[k] += acc / 10;
      }
      ++n_img;
    }
    for (int k : k_list) rep.per_class[cls][k] = sums[k] / n_img;
  }
  for (int k : k_list) {
    double s = 0;
    for (const auto& [cls, ar] : rep.per_class) s += ar.at(k);
    rep.mean[k] = rep.per_class.empty() ? 0.0 : s / double(rep.per_class.size());
  }
  return rep;
}

// Independent precision-recall oracle: the interpolated precision at each of
// the 101 recall points is taken as a direct maximum over ranked-list
// prefixes, with no precision-envelope precomputation.
ApReport oracle_ap(const std::vector<EvalDetection>& dets, const std::vector<GtBox>& gts) {
  std::map<int, std::map<int, std::vector<Box>>> gt_by;
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
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (dets[size_t(a)].score != dets[size_t(b)].score)
        return dets[size_t(a)].score > dets[size_t(b)].score;
      return dets[size_t(a)].image_id < dets[size_t(b)].image_id;
    });
    double ap_sum = 0, ap50 = 0, ap75 = 0;
    for (int s = 0; s < 10; ++s) {
      double t = 0.5 + 0.05 * s;
      std::set<std::pair<int, int>> taken;  // (image, gt index)
      std::vector<double> prec, rec;
      int cum = 0;
      for (size_t d = 0; d < order.size(); ++d) {
        const EvalDetection& det = dets[size_t(order[d])];
        int best = -1;
        double best_iou = 0;
        auto gi = gt_by[cls].find(det.image_id);
        if (gi != gt_by[cls].end())
          for (int g = 0; g < int(gi->second.size()); ++g) {
            if (taken.count({det.image_id, g})) continue;
            double v = iou(det.box, gi->second[size_t(g)]);
            if (v > best_iou) {
              best_iou = v;
              best = g;
            }
          }
        if (best >= 0 && best_iou >= t) {
          taken.insert({det.image_id, best});
          ++cum;
        }
        prec.push_back(double(cum) / double(d + 1));
        rec.push_back(double(cum) / double(n_gt[cls]));
      }
      double ap = 0;
      for (int r = 0; r <= 100; ++r) {
        double rp = double(r) / 100.0, p = 0;
        bool any = false;
        for (size_t d = 0; d < order.size(); ++d)
          if (rec[d] >= rp) {
            p = std::max(p, prec[d]);
            any = true;
          }
        if (any) ap += p;
      }
      ap /= 101.0;
      ap_sum += ap;
      if (s == 0) ap50 = ap;
      if (s == 5) ap75 = ap;
    }
    rep.ap[cls] = ap_sum / 10;
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

Box rand_box(Rng& rng, double extent) {
  double x1 = rng.uniform(0, extent - 12), y1 = rng.uniform(0, extent - 12);
  return mk(x1, y1, x1 + rng.uniform(4, 30), y1 + rng.uniform(4, 30));
}

bool same_dets(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score ||
        a[i].box.x1 != b[i].box.x1 || a[i].box.y1 != b[i].box.y1 ||
        a[i].box.x2 != b[i].box.x2 || a[i].box.y2 != b[i].box.y2)
      return false;
  return true;
}

}  // namespace

TEST_CASE("average recall closed forms") {
  std::vector<GtBox> gts = {{0, 1, mk(0, 0, 10, 10)}, {0, 1, mk(20, 0, 30, 10)}};

  SUBCASE("perfect proposals reach 1.0 once the budget covers the boxes") {
    ProposalMap pm;
    pm[1][0] = {prop(mk(0, 0, 10, 10), 0.9), prop(mk(20, 0, 30, 10), 0.8)};
    ArReport rep = eval_ar(pm, gts, {1, 2, 100});
    CHECK(rep.per_class.at(1).at(1) == 0.5);  // one proposal, two boxes
    CHECK(rep.per_class.at(1).at(2) == 1.0);
    CHECK(rep.per_class.at(1).at(100) == 1.0);
    CHECK(rep.mean.at(2) == 1.0);
  }

  SUBCASE("a single 0.625-overlap proposal passes exactly three thresholds") {
    // [0,0,10,6.25] inside [0,0,10,10]: intersection 62.5, union 100.
    std::vector<GtBox> one = {{0, 1, mk(0, 0, 10, 10)}};
    ProposalMap pm;
    pm[1][0] = {prop(mk(0, 0, 10, 6.25), 0.9)};
    ArReport rep = eval_ar(pm, one, {10});
    CHECK(rep.per_class.at(1).at(10) == doctest::Approx(0.3).epsilon(1e-12));
  }

  SUBCASE("classes without proposals score zero and still count in the mean") {
    ProposalMap pm;
    pm[1][0] = {prop(mk(0, 0, 10, 10), 0.9), prop(mk(20, 0, 30, 10), 0.8)};
    std::vector<GtBox> two_cls = gts;
    two_cls.push_back({0, 2, mk(40, 40, 60, 60)});
    ArReport rep = eval_ar(pm, two_cls, {10});
    CHECK(rep.per_class.at(1).at(10) == 1.0);
    CHECK(rep.per_class.at(2).at(10) == 0.0);
    CHECK(rep.mean.at(10) == 0.5);
  }

  SUBCASE("images average before classes") {
    ProposalMap pm;
    pm[1][0] = {prop(mk(0, 0, 10, 10), 0.9), prop(mk(20, 0, 30, 10), 0.8)};
    // Second image: no proposals at all.
    std::vector<GtBox> span = gts;
    span.push_back({7, 1, mk(0, 0, 10, 10)});
    ArReport rep = eval_ar(pm, span, {10});
    CHECK(rep.per_class.at(1).at(10) == 0.5);
  }
}

TEST_CASE("average recall matches a repeated-max oracle on random fixtures") {
  std::vector<int> budgets = {1, 3, 5, 100};
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed * 31 + 5);
    std::vector<GtBox> gts;
    ProposalMap pm;
    for (int cls = 1; cls <= 2; ++cls)
      for (int img = 0; img < 3; ++img) {
        int n_gt = rng.uniform_int(1, 4);
        for (int g = 0; g < n_gt; ++g) gts.push_back({img, cls, rand_box(rng, 100)});
        int n_p = rng.uniform_int(0, 12);
        for (int p = 0; p < n_p; ++p)
          pm[cls][img].push_back(prop(rand_box(rng, 100), rng.uniform(0, 1)));
      }
    ArReport got = eval_ar(pm, gts, budgets);
    ArReport want = oracle_ar(pm, gts, budgets);
    for (const auto& [cls, by_k] : want.per_class)
      for (const auto& [k, v] : by_k) CHECK(got.per_class.at(cls).at(k) == v);
    for (const auto& [k, v] : want.mean) CHECK(got.mean.at(k) == v);
    // Larger budgets can only admit more matches.
    for (const auto& [cls, by_k] : got.per_class) {
      CHECK(by_k.at(1) <= by_k.at(3));
      CHECK(by_k.at(3) <= by_k.at(5));
      CHECK(by_k.at(5) <= by_k.at(100));
    }
  }
}

TEST_CASE("average precision closed forms") {
  std::vector<GtBox> gts = {{0, 1, mk(0, 0, 10, 10)}};

  SUBCASE("one exact detection is perfect at every threshold") {
    std::vector<EvalDetection> dets = {{0, 1, mk(0, 0, 10, 10), 0.9}};
    ApReport rep = eval_ap(dets, gts);
    CHECK(rep.ap.at(1) == 1.0);
    CHECK(rep.ap50.at(1) == 1.0);
    CHECK(rep.ap75.at(1) == 1.0);
    CHECK(rep.mean_ap == 1.0);
  }

  SUBCASE("a rank-one false positive above an exact match halves the AP") {
    std::vector<EvalDetection> dets = {{0, 1, mk(50, 50, 60, 60), 0.9},
                                       {0, 1, mk(0, 0, 10, 10), 0.8}};
    ApReport rep = eval_ap(dets, gts);
    CHECK(rep.ap50.at(1) == 0.5);
    CHECK(rep.ap75.at(1) == 0.5);
    CHECK(rep.ap.at(1) == 0.5);
  }

  SUBCASE("no detections scores zero, detections for unseen classes are ignored") {
    std::vector<EvalDetection> none;
    ApReport rep = eval_ap(none, gts);
    CHECK(rep.ap.at(1) == 0.0);
    CHECK(rep.mean_ap == 0.0);

    std::vector<EvalDetection> other = {{0, 9, mk(0, 0, 10, 10), 0.9}};
    rep = eval_ap(other, gts);
    CHECK(rep.ap.count(9) == 0);
    CHECK(rep.ap.at(1) == 0.0);
  }

  SUBCASE("duplicate detections of one box count once") {
    std::vector<EvalDetection> dets = {{0, 1, mk(0, 0, 10, 10), 0.9},
                                       {0, 1, mk(0, 0, 10, 10), 0.8}};
    ApReport rep = eval_ap(dets, gts);
    CHECK(rep.ap50.at(1) == 1.0);  // rank-2 duplicate is a trailing FP
  }
}

TEST_CASE("average precision matches a brute-force evaluator on random fixtures") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed * 17 + 3);
    std::vector<GtBox> gts;
    std::vector<EvalDetection> dets;
    for (int cls = 1; cls <= 2; ++cls)
      for (int img = 0; img < 3; ++img) {
        int n_gt = rng.uniform_int(1, 3);
        for (int g = 0; g < n_gt; ++g) gts.push_back({img, cls, rand_box(rng, 100)});
        int n_d = rng.uniform_int(0, 6);
        for (int d = 0; d < n_d; ++d) {
          // Half the detections perturb a ground-truth box so TPs exist.
          Box b = rand_box(rng, 100);
          if (d % 2 == 0 && !gts.empty()) {
            const Box& g = gts[size_t(rng.uniform_int(0, int(gts.size()) - 1))].box;
            double j = rng.uniform(-3, 3);
            b = mk(g.x1 + j, g.y1 - j, g.x2 + j, g.y2 - j);
          }
          dets.push_back({img, cls, b, rng.uniform(0, 1)});
        }
      }
    ApReport got = eval_ap(dets, gts);
    ApReport want = oracle_ap(dets, gts);
    for (const auto& [cls, v] : want.ap) {
      CHECK(got.ap.at(cls) == v);
      CHECK(got.ap50.at(cls) == want.ap50.at(cls));
      CHECK(got.ap75.at(cls) == want.ap75.at(cls));
    }
    CHECK(got.mean_ap == want.mean_ap);
    CHECK(got.mean_ap50 == want.mean_ap50);
    CHECK(got.mean_ap75 == want.mean_ap75);
  }
}

TEST_CASE("few-shot detection is per class independent of co-enrolled classes") {
  ModelConfig mc;
  mc.backbone.stage1 = {{3, 2}, {4, 2}};
  mc.backbone.stage2 = {5};
  mc.rpn.anchors = {{10, 20}, {1.0}, 4};
  mc.rpn.pre_nms_k = 40;
  mc.rpn.post_nms_k = 12;
  mc.cls.roi_size = 3;
  mc.cls.psi_layers = 1;
  mc.support_size = 24;

  ParamStore params;
  Rng rng(99);
  init_backbone(params, mc.backbone, rng);
  init_meta_rpn(params, mc.rpn, mc.backbone.stage1_channels(), rng);
  init_meta_classifier(params, mc.cls, mc.backbone.stage2_channels(), rng);

  auto rand_image = [&](int h, int w) {
    Tensor t({h, w, 3});
    for (int64_t i = 0; i < t.size(); ++i) t[i] = float(rng.uniform(0, 1));
    return t;
  };
  Tensor image = rand_image(32, 32);

  std::vector<ClassPrototype> protos;
  for (int cls = 1; cls <= 3; ++cls) {
    std::vector<SupportExample> sup = {{rand_image(32, 32), mk(4, 4, 20, 20), cls},
                                       {rand_image(32, 32), mk(8, 2, 30, 24), cls}};
    protos.push_back(
        compute_prototype(params, mc.backbone, sup, mc.support_context, mc.support_size));
  }

  MetaDetections one = meta_test_detect(params, mc, image, {protos[0]});
  MetaDetections two = meta_test_detect(params, mc, image, {protos[0], protos[1]});
  MetaDetections all = meta_test_detect(params, mc, image, protos);

  SUBCASE("per-class results never move when more classes enroll") {
    REQUIRE(one.per_class.count(1) == 1);
    CHECK(same_dets(one.per_class.at(1), two.per_class.at(1)));
    CHECK(same_dets(one.per_class.at(1), all.per_class.at(1)));
    CHECK(same_dets(two.per_class.at(2), all.per_class.at(2)));
  }

  SUBCASE("merged list is the finalized union of the per-class lists") {
    std::vector<Detection> cat;
    for (const auto& [cls, dets] : all.per_class) cat.insert(cat.end(), dets.begin(), dets.end());
    std::vector<Detection> want = finalize_detections(std::move(cat), mc.cls.score_threshold,
                                                      mc.cls.nms_iou, mc.cls.max_detections);
    CHECK(same_dets(all.merged, want));
    CHECK(int(all.merged.size()) <= mc.cls.max_detections);
    for (size_t i = 1; i < all.merged.size(); ++i)
      CHECK(all.merged[i - 1].score >= all.merged[i].score);
  }

  SUBCASE("repeat run is bitwise identical and stages are timed") {
    MetaDetections again = meta_test_detect(params, mc, image, protos);
    CHECK(same_dets(again.merged, all.merged));
    CHECK(all.proposal_s > 0);
    CHECK(all.classify_s > 0);
  }

  SUBCASE("no enrolled classes means no work") {
    MetaDetections none = meta_test_detect(params, mc, image, {});
    CHECK(none.merged.empty());
    CHECK(none.per_class.empty());
    CHECK(none.proposal_s == 0);
  }

  SUBCASE("per-class proposal helper is deterministic and capped") {
    std::vector<Proposal> a = class_proposals(params, mc, image, protos[0]);
    std::vector<Proposal> b = class_proposals(params, mc, image, protos[0]);
    REQUIRE(a.size() == b.size());
    CHECK(int(a.size()) <= mc.rpn.post_nms_k);
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].score == b[i].score);
      CHECK(a[i].box.x1 == b[i].box.x1);
    }
  }
}

TEST_CASE("evaluation report serialization") {
  EvalReport rep;
  rep.class_names = {{3, "ring"}, {5, "cross"}};
  rep.per_class[3] = {{"AP", 0.25}, {"AP50", 0.5}};
  rep.per_class[5] = {{"AP", 0.75}, {"AP50", 1.0}};
  rep.per_class_ar[3] = {{5, 0.2}, {100, 0.4}};
  rep.mean = {{"AP", 0.5}, {"AP50", 0.75}};
  rep.mean_ar = {{5, 0.2}, {100, 0.4}};
  rep.timing_s = {{"detect", 1.5}};

  std::string a = eval_report_json(rep);
  std::string b = eval_report_json(rep);
  CHECK(a == b);
  CHECK(a.back() == '\n');

  nlohmann::json j = nlohmann::json::parse(a);
  CHECK(j["per_class"]["3"]["name"] == "ring");
  CHECK(j["per_class"]["3"]["AP"] == 0.25);
  CHECK(j["per_class"]["3"]["AR@k"]["100"] == 0.4);
  CHECK(j["per_class"]["5"]["AP50"] == 1.0);
  CHECK(j["mean"]["AP"] == 0.5);
  CHECK(j["mean"]["AR@k"]["5"] == 0.2);
  CHECK(j["timing_s"]["detect"] == 1.5);

  std::string path = "eval_report_test.json";
  write_eval_report(rep, path);
  CHECK(slurp(path) == a);
  std::remove(path.c_str());
}

TEST_CASE("detection and proposal dumps") {
  SUBCASE("detections json round-trips") {
    std::vector<EvalDetection> dets = {{7, 3, mk(1, 2, 3, 4), 0.5},
                                       {8, 1, mk(0, 0, 10, 10), 0.25}};
    std::string path = "dets_test.json";
    write_detections_json(dets, path);
    nlohmann::json j = nlohmann::json::parse(slurp(path));
    REQUIRE(j.is_array());
    REQUIRE(j.size() == 2);
    CHECK(j[0]["image_id"] == 7);
    CHECK(j[0]["class_id"] == 3);
    CHECK(j[0]["bbox"] == nlohmann::json({1.0, 2.0, 3.0, 4.0}));
    CHECK(j[0]["score"] == 0.5);
    CHECK(j[1]["image_id"] == 8);
    std::string first = slurp(path);
    write_detections_json(dets, path);
    CHECK(slurp(path) == first);
    std::remove(path.c_str());
  }

  SUBCASE("proposals csv is exact") {
    ProposalMap pm;
    pm[3][7] = {prop(mk(1, 2, 3, 4), 0.5)};
    pm[1][9] = {prop(mk(0, 0, 10.25, 10), 0.125)};
    std::string path = "props_test.csv";
    write_proposals_csv(pm, path);
    CHECK(slurp(path) ==
          "image_id,class_id,x1,y1,x2,y2,score\n"
          "9,1,0.0000,0.0000,10.2500,10.0000,0.125000\n"
          "7,3,1.0000,2.0000,3.0000,4.0000,0.500000\n");
    std::remove(path.c_str());
  }
}
