#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "metadet/geometry.hpp"
#include "metadet/util.hpp"

using namespace metadet;

namespace {

// Reference NMS: repeated linear scan over a live list, no sort, no
// suppression bookkeeping shared with the production path.
std::vector<int> nms_oracle(const std::vector<Box>& boxes, const std::vector<double>& scores,
                            double thr) {
  std::vector<int> live(boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) live[i] = int(i);
  std::vector<int> kept;
  while (!live.empty()) {
    int best = live[0];
    for (int i : live)
      if (scores[size_t(i)] > scores[size_t(best)]) best = i;
    kept.push_back(best);
    std::vector<int> next;
    for (int i : live)
      if (i != best && !(iou(boxes[size_t(i)], boxes[size_t(best)]) > thr)) next.push_back(i);
    live = std::move(next);
  }
  return kept;
}

std::vector<Box> random_boxes(Rng& rng, int n, double extent) {
  std::vector<Box> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    double x1 = rng.uniform(0, extent - 2);
    double y1 = rng.uniform(0, extent - 2);
    double w = rng.uniform(2, extent / 3);
    double h = rng.uniform(2, extent / 3);
    out.push_back(Box{x1, y1, std::min(x1 + w, extent), std::min(y1 + h, extent)});
  }
  return out;
}

}  // namespace

TEST_CASE("iou basics") {
  Box a{0, 0, 10, 10};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, Box{20, 20, 30, 30}) == doctest::Approx(0.0));
  // Half-overlapping congruent boxes: inter 50, union 150.
  CHECK(iou(a, Box{5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0));
  // Degenerate boxes have zero area and zero IoU.
  CHECK(iou(a, Box{3, 3, 3, 8}) == doctest::Approx(0.0));
  CHECK(iou(Box{5, 5, 2, 9}, a) == doctest::Approx(0.0));
  // Touching edges do not intersect.
  CHECK(iou(a, Box{10, 0, 20, 10}) == doctest::Approx(0.0));

  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    auto bs = random_boxes(rng, 2, 50);
    double v = iou(bs[0], bs[1]);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == doctest::Approx(iou(bs[1], bs[0])));
  }
}

TEST_CASE("nms keeps the highest-scoring box and breaks ties low-index-first") {
  std::vector<Box> boxes{{0, 0, 10, 10}, {1, 1, 11, 11}, {40, 40, 50, 50}};
  std::vector<double> scores{0.8, 0.9, 0.5};
  auto kept = nms(boxes, scores, 0.5);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0] == 1);
  CHECK(kept[1] == 2);

  // Identical boxes, identical scores: index 0 wins.
  std::vector<Box> same{{0, 0, 10, 10}, {0, 0, 10, 10}};
  auto kept2 = nms(same, {0.7, 0.7}, 0.5);
  REQUIRE(kept2.size() == 1);
  CHECK(kept2[0] == 0);

  // Suppression is strict: IoU exactly at the threshold survives.
  std::vector<Box> halves{{0, 0, 10, 10}, {5, 0, 15, 10}};
  auto kept3 = nms(halves, {0.9, 0.8}, 1.0 / 3.0);
  CHECK(kept3.size() == 2);

  CHECK_THROWS_AS(nms(boxes, {0.1, 0.2}, 0.5), std::invalid_argument);
}

TEST_CASE("nms matches the reference implementation on random sets") {
  for (uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(seed * 31);
    auto boxes = random_boxes(rng, 400, 100);
    std::vector<double> scores;
    for (int i = 0; i < 400; ++i) {
      double s = rng.uniform();
      // Quantize so duplicate scores actually occur and exercise tie-breaks.
      scores.push_back(std::floor(s * 64.0) / 64.0);
    }
    for (double thr : {0.3, 0.5, 0.7}) {
      auto got = nms(boxes, scores, thr);
      auto want = nms_oracle(boxes, scores, thr);
      CHECK(got == want);
    }
  }
}

TEST_CASE("anchor grid layout and sizes") {
  AnchorSpec spec;
  spec.scales = {16, 32};
  spec.ratios = {0.5, 1, 2};
  spec.stride = 8;
  auto anchors = generate_anchors(3, 4, spec);
  REQUIRE(anchors.size() == size_t(3 * 4 * 3 * 2));

  // Cell (0,0): center (4,4). Flattened as ((h*W + w)*R + r)*S + s.
  const Box& a0 = anchors[0];  // ratio 0.5, scale 16
  CHECK(a0.cx() == doctest::Approx(4.0));
  CHECK(a0.cy() == doctest::Approx(4.0));
  CHECK(a0.w() == doctest::Approx(16.0 / std::sqrt(0.5)));
  CHECK(a0.h() == doctest::Approx(16.0 * std::sqrt(0.5)));
  // Area is scale^2 at every ratio.
  for (int r = 0; r < 3; ++r) {
    const Box& a = anchors[size_t(r * 2)];
    CHECK(a.area() == doctest::Approx(256.0));
  }
  // Cell (h=1, w=2) center: ((2+0.5)*8, (1+0.5)*8) = (20, 12).
  const Box& c = anchors[size_t(((1 * 4 + 2) * 3 + 0) * 2 + 0)];
  CHECK(c.cx() == doctest::Approx(20.0));
  CHECK(c.cy() == doctest::Approx(12.0));

  CHECK_THROWS_AS(generate_anchors(0, 4, spec), std::invalid_argument);
  AnchorSpec bad = spec;
  bad.ratios = {-1.0};
  CHECK_THROWS_AS(generate_anchors(3, 4, bad), std::invalid_argument);
}

TEST_CASE("delta encode/decode") {
  Box anchor{0, 0, 10, 10};
  // Target shifted right by half the anchor width.
  Delta d = encode_box(Box{5, 0, 15, 10}, anchor);
  CHECK(d.tx == doctest::Approx(0.5));
  CHECK(d.ty == doctest::Approx(0.0));
  CHECK(d.tw == doctest::Approx(0.0));
  CHECK(d.th == doctest::Approx(0.0));

  // Identity delta decodes to the anchor itself.
  Box same = decode_box(Delta{}, anchor);
  CHECK(same.x1 == doctest::Approx(0.0));
  CHECK(same.x2 == doctest::Approx(10.0));

  // Doubling delta: tw = ln 2.
  Delta d2 = encode_box(Box{-5, -5, 15, 15}, anchor);
  CHECK(d2.tw == doctest::Approx(std::log(2.0)));

  Rng rng(77);
  for (int i = 0; i < 500; ++i) {
    auto bs = random_boxes(rng, 2, 80);
    Delta enc = encode_box(bs[0], bs[1]);
    Box back = decode_box(enc, bs[1]);
    CHECK(std::abs(back.x1 - bs[0].x1) < 1e-6);
    CHECK(std::abs(back.y1 - bs[0].y1) < 1e-6);
    CHECK(std::abs(back.x2 - bs[0].x2) < 1e-6);
    CHECK(std::abs(back.y2 - bs[0].y2) < 1e-6);
  }

  CHECK_THROWS_AS(encode_box(Box{0, 0, 0, 5}, anchor), std::invalid_argument);
  CHECK_THROWS_AS(decode_box(Delta{}, Box{3, 3, 3, 3}), std::invalid_argument);
}

TEST_CASE("anchor matching rules") {
  std::vector<Box> anchors{
      {0, 0, 10, 10},    // IoU 1.0 with gt0
      {2, 0, 12, 10},    // IoU ~0.667 with gt0
      {30, 30, 40, 40},  // far from everything
      {52, 50, 60, 60},  // best anchor for gt1, IoU below pos threshold
  };
  std::vector<Box> gts{{0, 0, 10, 10}, {50, 50, 62, 61}};
  auto assign = match_anchors(anchors, gts, 0.7, 0.3);
  REQUIRE(assign.size() == 4);
  CHECK(assign[0] == 0);
  CHECK(assign[1] == kIgnore);   // between 0.3 and 0.7
  CHECK(assign[2] == kNegative);
  CHECK(assign[3] == 1);         // claimed via the per-gt argmax rule

  // No ground truth: everything is negative.
  auto none = match_anchors(anchors, {}, 0.7, 0.3);
  for (int v : none) CHECK(v == kNegative);

  // Equal thresholds: no ignore band.
  auto eq = match_anchors(anchors, gts, 0.5, 0.5);
  for (int v : eq) CHECK(v != kIgnore);

  CHECK_THROWS_AS(match_anchors(anchors, gts, 0.3, 0.7), std::invalid_argument);
}

TEST_CASE("anchor matching properties on random instances") {
  Rng rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    auto anchors = random_boxes(rng, 60, 100);
    auto gts = random_boxes(rng, 4, 100);
    auto assign = match_anchors(anchors, gts, 0.6, 0.3);
    // Each gt's argmax anchor is labeled positive (it may be assigned to a
    // different gt when two gts share the same best anchor).
    for (size_t g = 0; g < gts.size(); ++g) {
      double best = 0;
      int best_a = -1;
      for (size_t a = 0; a < anchors.size(); ++a) {
        double v = iou(anchors[a], gts[g]);
        if (v > best) {
          best = v;
          best_a = int(a);
        }
      }
      if (best_a >= 0) CHECK(assign[size_t(best_a)] >= 0);
    }
    // Positives beat the ignore band; negatives sit below it.
    for (size_t a = 0; a < anchors.size(); ++a) {
      double best = 0;
      for (const Box& g : gts) best = std::max(best, iou(anchors[a], g));
      if (assign[a] == kNegative) CHECK(best < 0.3);
      if (assign[a] == kIgnore) {
        CHECK(best >= 0.3);
        CHECK(best < 0.6);
      }
    }
  }
}

TEST_CASE("smooth_l1 reference values") {
  // d = 0.5, beta = 1: quadratic zone, 0.125 per coordinate.
  std::vector<double> pred{0.5, 0.5, 0.5, 0.5};
  std::vector<double> zero(4, 0.0);
  CHECK(smooth_l1(pred, zero, 1.0) == doctest::Approx(0.5));
  // Two rows: sum 8 * 0.125 over 2 rows.
  std::vector<double> pred2(8, 0.5), zero8(8, 0.0);
  CHECK(smooth_l1(pred2, zero8, 1.0) == doctest::Approx(0.5));
  // Linear zone.
  std::vector<double> far{3.0, 0, 0, 0};
  CHECK(smooth_l1(far, zero, 1.0) == doctest::Approx(2.5));

  CHECK_THROWS_AS(smooth_l1(pred, zero8, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(smooth_l1({1.0, 2.0}, {0.0, 0.0}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(smooth_l1(pred, zero, 0.0), std::invalid_argument);
}

TEST_CASE("clip_box clamps to the image") {
  Box b = clip_box(Box{-5, -3, 120, 40}, 96, 96);
  CHECK(b.x1 == 0);
  CHECK(b.y1 == 0);
  CHECK(b.x2 == 96);
  CHECK(b.y2 == 40);
}
