#include <cmath>

#include "doctest.h"
#include "metadet/meta_rpn.hpp"
#include "test_helpers.hpp"

using namespace metadet;

namespace {

MetaRpnConfig small_cfg() {
  MetaRpnConfig cfg;
  cfg.anchors = AnchorSpec{{8.0, 16.0}, {1.0}, 8};  // 2 anchors per cell
  cfg.pre_nms_k = 64;
  cfg.post_nms_k = 16;
  return cfg;
}

Tensor identity_1x1(int c) {
  Tensor w({1, 1, c, c});
  for (int i = 0; i < c; ++i) w[int64_t(i) * c + i] = 1.0f;
  return w;
}

}  // namespace

TEST_CASE("fusion concatenates the enabled branches in fixed order") {
  const int C = 5;
  MetaRpnConfig cfg = small_cfg();
  ParamStore params;
  Rng rng(1);
  init_meta_rpn(params, cfg, C, rng);

  Tensor fq({3, 4, C});
  for (int64_t i = 0; i < fq.size(); ++i) fq[i] = float(rng.uniform(-1, 1));
  Tensor fp({C});
  for (int64_t i = 0; i < fp.size(); ++i) fp[i] = float(rng.uniform(-1, 1));

  auto fuse_shape = [&](MetaRpnConfig c2) {
    Tape tape(false);
    FBinder b(tape, params.tensors);
    return tape.val(fuse_features(b, tape.input(fq), tape.input(fp), c2)).shape;
  };

  CHECK(fuse_shape(cfg) == std::vector<int>{3, 4, 3 * C});
  MetaRpnConfig only_cat = cfg;
  only_cat.use_mult = only_cat.use_sub = false;
  CHECK(fuse_shape(only_cat) == std::vector<int>{3, 4, C});
  MetaRpnConfig two = cfg;
  two.use_cat = false;
  CHECK(fuse_shape(two) == std::vector<int>{3, 4, 2 * C});

  MetaRpnConfig none = cfg;
  none.use_mult = none.use_sub = none.use_cat = false;
  Tape tape(false);
  FBinder b(tape, params.tensors);
  CHECK_THROWS_AS(fuse_features(b, tape.input(fq), tape.input(fp), none),
                  std::invalid_argument);
  Tensor bad_fp({C + 1});
  CHECK_THROWS_AS(fuse_features(b, tape.input(fq), tape.input(bad_fp), cfg),
                  std::invalid_argument);
}

TEST_CASE("product branch with ones prototype and identity kernel is ReLU(f_q)") {
  const int C = 4;
  MetaRpnConfig cfg = small_cfg();
  cfg.use_sub = cfg.use_cat = false;
  ParamStore params;
  Rng rng(2);
  init_meta_rpn(params, cfg, C, rng);
  params.at("meta_rpn.mult.w") = identity_1x1(C);
  params.at("meta_rpn.mult.b") = Tensor({C});

  Tensor fq({2, 3, C});
  for (int64_t i = 0; i < fq.size(); ++i) fq[i] = float(rng.uniform(-1, 1));
  Tensor ones = Tensor::full({C}, 1.0f);

  Tape tape(false);
  FBinder b(tape, params.tensors);
  Tensor out = tape.val(fuse_features(b, tape.input(fq), tape.input(ones), cfg));
  REQUIRE(out.shape == fq.shape);
  for (int64_t i = 0; i < fq.size(); ++i) REQUIRE(out[i] == std::max(0.0f, fq[i]));
}

TEST_CASE("difference branch vanishes when the prototype equals a constant map's mean") {
  const int C = 3;
  MetaRpnConfig cfg = small_cfg();
  cfg.use_mult = cfg.use_cat = false;
  ParamStore params;
  Rng rng(3);
  init_meta_rpn(params, cfg, C, rng);
  params.at("meta_rpn.sub.w") = identity_1x1(C);
  params.at("meta_rpn.sub.b") = Tensor({C});

  // Spatially constant map: each channel one value everywhere.
  Tensor fq({4, 4, C});
  Tensor mean({C});
  for (int c = 0; c < C; ++c) mean[c] = 0.3f * float(c + 1);
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w)
      for (int c = 0; c < C; ++c) fq.at3(h, w, c) = mean[c];

  Tape tape(false);
  FBinder b(tape, params.tensors);
  Tensor out = tape.val(fuse_features(b, tape.input(fq), tape.input(mean), cfg));
  for (int64_t i = 0; i < out.size(); ++i) REQUIRE(out[i] == 0.0f);

  // The literal-subtraction switch makes the product branch compute the
  // same difference, so it vanishes identically there too.
  MetaRpnConfig lit = small_cfg();
  lit.use_sub = lit.use_cat = false;
  lit.mult_literal_sub = true;
  params.at("meta_rpn.mult.w") = identity_1x1(C);
  params.at("meta_rpn.mult.b") = Tensor({C});
  Tape tape2(false);
  FBinder b2(tape2, params.tensors);
  Tensor out2 = tape2.val(fuse_features(b2, tape2.input(fq), tape2.input(mean), lit));
  for (int64_t i = 0; i < out2.size(); ++i) REQUIRE(out2[i] == 0.0f);
}

TEST_CASE("zero heads score every anchor 0.5 and propose the anchors themselves") {
  const int C = 6;
  MetaRpnConfig cfg = small_cfg();
  ParamStore params;
  Rng rng(4);
  init_meta_rpn(params, cfg, C, rng);
  const int A = cfg.anchors_per_cell();
  int fused = cfg.fused_channels(C);
  params.at("meta_rpn.cls.w") = Tensor({1, 1, fused, A});
  params.at("meta_rpn.cls.b") = Tensor({A});
  params.at("meta_rpn.reg.w") = Tensor({1, 1, fused, 4 * A});
  params.at("meta_rpn.reg.b") = Tensor({4 * A});

  Tensor fq({4, 4, C});
  for (int64_t i = 0; i < fq.size(); ++i) fq[i] = float(rng.uniform(0, 1));
  ClassPrototype proto;
  proto.f_pool = Tensor({C});
  for (int64_t i = 0; i < C; ++i) proto.f_pool[i] = float(rng.uniform(0, 1));

  auto props = generate_proposals(params, cfg, fq, proto, 32, 32);
  REQUIRE(!props.empty());
  CHECK(int(props.size()) <= cfg.post_nms_k);
  for (const auto& p : props) CHECK(p.score == doctest::Approx(0.5));

  // With equal scores, selection keeps flat anchor order and NMS keeps the
  // earliest survivor: the result is the anchor list itself (clipped),
  // greedily thinned at the NMS threshold.
  std::vector<Box> anchors = generate_anchors(4, 4, cfg.anchors);
  std::vector<Box> clipped;
  std::vector<double> ones;
  for (size_t i = 0; i < anchors.size() && i < size_t(cfg.pre_nms_k); ++i) {
    Box cb = clip_box(anchors[i], 32, 32);
    if (!cb.degenerate()) {
      clipped.push_back(cb);
      ones.push_back(1.0);
    }
  }
  std::vector<int> kept = nms(clipped, ones, cfg.nms_iou);
  REQUIRE(props.size() == std::min(kept.size(), size_t(cfg.post_nms_k)));
  for (size_t i = 0; i < props.size(); ++i) {
    CHECK(props[i].box.x1 == doctest::Approx(clipped[size_t(kept[i])].x1));
    CHECK(props[i].box.y2 == doctest::Approx(clipped[size_t(kept[i])].y2));
  }
}

TEST_CASE("proposal lists are per-class independent, sorted, and in (0,1)") {
  const int C = 6;
  MetaRpnConfig cfg = small_cfg();
  ParamStore params;
  Rng rng(5);
  init_meta_rpn(params, cfg, C, rng);
  // Spread the heads so scores are non-trivial.
  for (auto* name : {"meta_rpn.cls.w", "meta_rpn.reg.w"}) {
    Tensor& t = params.at(name);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = float(rng.uniform(-0.3, 0.3));
  }

  Tensor fq({4, 4, C});
  for (int64_t i = 0; i < fq.size(); ++i) fq[i] = float(rng.uniform(0, 1));
  ClassPrototype pa, pb;
  pa.f_pool = Tensor({C});
  pb.f_pool = Tensor({C});
  for (int i = 0; i < C; ++i) {
    pa.f_pool[i] = float(rng.uniform(0, 1));
    pb.f_pool[i] = float(rng.uniform(0, 1));
  }

  auto a1 = generate_proposals(params, cfg, fq, pa, 32, 32);
  auto b1 = generate_proposals(params, cfg, fq, pb, 32, 32);
  auto a2 = generate_proposals(params, cfg, fq, pa, 32, 32);
  REQUIRE(a1.size() == a2.size());
  for (size_t i = 0; i < a1.size(); ++i) {
    CHECK(a1[i].score == a2[i].score);
    CHECK(a1[i].box.x1 == a2[i].box.x1);
  }
  for (const auto& p : a1) {
    CHECK(p.score > 0.0);
    CHECK(p.score < 1.0);
  }
  for (size_t i = 1; i < a1.size(); ++i) CHECK(a1[i - 1].score >= a1[i].score);
  // Different prototypes really change the scoring (not a degenerate head).
  bool differs = a1.size() != b1.size();
  for (size_t i = 0; !differs && i < a1.size(); ++i) differs = a1[i].score != b1[i].score;
  CHECK(differs);

  // The depth-wise baseline produces its own valid, deterministic list.
  init_attn_rpn(params, cfg, C, rng);
  auto c1 = generate_proposals_attn(params, cfg, fq, pa, 32, 32);
  auto c2 = generate_proposals_attn(params, cfg, fq, pa, 32, 32);
  REQUIRE(c1.size() == c2.size());
  for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i].score == c2[i].score);
  for (size_t i = 1; i < c1.size(); ++i) CHECK(c1[i - 1].score >= c1[i].score);
}

TEST_CASE("meta-rpn objectness+delta loss passes the finite-difference check") {
  const int C = 3;
  MetaRpnConfig cfg;
  cfg.anchors = AnchorSpec{{8.0, 16.0}, {1.0}, 8};  // 2 anchors per cell
  ParamStore fparams;
  Rng rng(6);
  init_meta_rpn(fparams, cfg, C, rng);
  DParamMap params;
  for (const auto& [name, t] : fparams.tensors) {
    DTensor d = t.cast<double>();
    for (int64_t i = 0; i < d.size(); ++i)
      d[i] = d[i] == 0.0 ? rng.uniform(0.02, 0.1) : d[i] + (d[i] > 0 ? 0.02 : -0.02);
    params.emplace(name, d);
  }

  Rng drng(7);
  DTensor fq = testutil::random_tensor({4, 4, C}, drng, 0.0, 1.0);
  DTensor fp = testutil::random_tensor({C}, drng, 0.2, 1.0);
  const int A = cfg.anchors_per_cell();
  const int64_t n = 4 * 4 * A;

  // A fixed positive/negative anchor assignment drives both heads.
  std::vector<int64_t> pos = {3, 11, 20}, neg = {0, 7, 15, 29};
  std::vector<int64_t> cls_idx = pos;
  cls_idx.insert(cls_idx.end(), neg.begin(), neg.end());
  DTensor cls_target({int(cls_idx.size())});
  for (size_t i = 0; i < pos.size(); ++i) cls_target[int64_t(i)] = 1.0;
  std::vector<int64_t> reg_idx;
  for (int64_t p : pos)
    for (int64_t k = 0; k < 4; ++k) reg_idx.push_back(p * 4 + k);
  DTensor reg_target = testutil::random_tensor({int(reg_idx.size())}, drng, -0.5, 0.5);

  auto rep = testutil::check_binder_graph(params, [&](Binder<double>& b) {
    auto& tape = b.tape();
    RpnOut<double> out = meta_rpn_forward(b, tape.input(fq), tape.input(fp), cfg);
    DVar logits = tape.gather(tape.reshape(out.logits, {int(n)}), cls_idx);
    DVar cls_loss = tape.bce_with_logits(logits, cls_target);
    DVar deltas = tape.gather(tape.reshape(out.deltas, {int(n) * 4}), reg_idx);
    DVar reg_loss = tape.smooth_l1(deltas, reg_target, 1.0, int64_t(pos.size()));
    return tape.add(cls_loss, reg_loss);
  });
  CAPTURE(rep.worst_param);
  CAPTURE(rep.analytic);
  CAPTURE(rep.numeric);
  CHECK(rep.max_rel_error < 1e-4);
}
