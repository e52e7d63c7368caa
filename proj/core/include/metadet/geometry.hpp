#pragma once

#include <vector>

namespace metadet {

// Axis-aligned box in corner form, coordinates in pixels. Boxes with
// x2 <= x1 or y2 <= y1 are degenerate: zero area, IoU 0 against anything.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return (w() > 0 && h() > 0) ? w() * h() : 0.0; }
  bool degenerate() const { return w() <= 0 || h() <= 0; }
};

double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

// Greedy NMS. Returns indices of kept boxes in descending-score order;
// equal scores break toward the lower index, and a candidate is suppressed
// when its IoU with an already-kept box exceeds (strictly) the threshold.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

struct AnchorSpec {
  std::vector<double> scales;  // sqrt-area in pixels
  std::vector<double> ratios;  // height / width
  int stride = 8;
};

// One anchor per (cell, ratio, scale), flattened row-major in exactly that
// order: index = ((h * W + w) * R + r) * S + s. Centers sit at
// ((w + 0.5) * stride, (h + 0.5) * stride); a scale-s ratio-r anchor is
// s/sqrt(r) wide and s*sqrt(r) tall, so area is s^2 at every ratio.
std::vector<Box> generate_anchors(int feat_h, int feat_w, const AnchorSpec& spec);

// Parameterized offsets between an anchor and a target box:
//   tx = (cx_t - cx_a) / w_a   ty = (cy_t - cy_a) / h_a
//   tw = ln(w_t / w_a)         th = ln(h_t / h_a)
struct Delta {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

Delta encode_box(const Box& target, const Box& anchor);
Box decode_box(const Delta& d, const Box& anchor);

// Per-anchor assignment: value >= 0 is the matched ground-truth index,
// kNegative means background, kIgnore means excluded from training.
//
// Rules: an anchor is positive when its best IoU >= pos_iou (assigned to the
// argmax ground truth, ties to the lowest gt index); additionally each ground
// truth claims its highest-IoU anchor (ties to the lowest anchor index) even
// below pos_iou, provided the IoU is > 0. Anchors with best IoU < neg_iou are
// negative; the band between the two thresholds is ignored. Requires
// pos_iou >= neg_iou; with equal thresholds no anchor is ignored. No ground
// truths means every anchor is negative.
constexpr int kNegative = -1;
constexpr int kIgnore = -2;
std::vector<int> match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                               double pos_iou, double neg_iou);

// Huber distance between flat delta vectors (4 coordinates per row):
// per coordinate 0.5*d^2/beta when |d| < beta, else |d| - 0.5*beta;
// summed, then divided by the number of rows.
double smooth_l1(const std::vector<double>& pred, const std::vector<double>& target, double beta);

}  // namespace metadet
