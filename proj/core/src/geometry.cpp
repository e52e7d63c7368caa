#include "metadet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace metadet {

double iou(const Box& a, const Box& b) {
  const double aa = a.area(), ab = b.area();
  if (aa <= 0 || ab <= 0) return 0.0;
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / (aa + ab - inter);
}

Box clip_box(const Box& b, double width, double height) {
  return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
             std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
  if (boxes.size() != scores.size())
    throw std::invalid_argument("nms: boxes/scores size mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[size_t(a)] > scores[size_t(b)];
  });
  std::vector<int> kept;
  std::vector<char> dead(boxes.size(), 0);
  for (int idx : order) {
    if (dead[size_t(idx)]) continue;
    kept.push_back(idx);
    for (int other : order) {
      if (dead[size_t(other)] || other == idx) continue;
      if (iou(boxes[size_t(idx)], boxes[size_t(other)]) > iou_threshold)
        dead[size_t(other)] = 1;
    }
  }
  return kept;
}

std::vector<Box> generate_anchors(int feat_h, int feat_w, const AnchorSpec& spec) {
  if (feat_h <= 0 || feat_w <= 0)
    throw std::invalid_argument("generate_anchors: non-positive grid");
  if (spec.scales.empty() || spec.ratios.empty())
    throw std::invalid_argument("generate_anchors: empty scales or ratios");
  if (spec.stride <= 0) throw std::invalid_argument("generate_anchors: non-positive stride");
  for (double s : spec.scales)
    if (s <= 0) throw std::invalid_argument("generate_anchors: non-positive scale");
  for (double r : spec.ratios)
    if (r <= 0) throw std::invalid_argument("generate_anchors: non-positive ratio");

  std::vector<Box> out;
  out.reserve(size_t(feat_h) * feat_w * spec.ratios.size() * spec.scales.size());
  for (int h = 0; h < feat_h; ++h) {
    for (int w = 0; w < feat_w; ++w) {
      const double cx = (w + 0.5) * spec.stride;
      const double cy = (h + 0.5) * spec.stride;
      for (double r : spec.ratios) {
        for (double s : spec.scales) {
          const double bw = s / std::sqrt(r);
          const double bh = s * std::sqrt(r);
          out.push_back(Box{cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2});
        }
      }
    }
  }
  return out;
}

Delta encode_box(const Box& target, const Box& anchor) {
  if (target.degenerate() || anchor.degenerate())
    throw std::invalid_argument("encode_box: degenerate box");
  return Delta{(target.cx() - anchor.cx()) / anchor.w(), (target.cy() - anchor.cy()) / anchor.h(),
               std::log(target.w() / anchor.w()), std::log(target.h() / anchor.h())};
}

Box decode_box(const Delta& d, const Box& anchor) {
  if (anchor.degenerate()) throw std::invalid_argument("decode_box: degenerate anchor");
  const double cx = anchor.cx() + d.tx * anchor.w();
  const double cy = anchor.cy() + d.ty * anchor.h();
  const double w = anchor.w() * std::exp(d.tw);
  const double h = anchor.h() * std::exp(d.th);
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::vector<int> match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                               double pos_iou, double neg_iou) {
  if (pos_iou < neg_iou)
    throw std::invalid_argument("match_anchors: pos_iou must be >= neg_iou");
  std::vector<int> assign(anchors.size(), kNegative);
  if (gts.empty()) return assign;

  for (size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[a], gts[g]);
      if (v > best) {  // strict: ties resolve to the lowest gt index
        best = v;
        best_gt = int(g);
      }
    }
    if (best >= pos_iou && best_gt >= 0)
      assign[a] = best_gt;
    else if (best >= neg_iou)
      assign[a] = kIgnore;
  }

  // Every gt claims its best-overlapping anchor so no target goes unmatched.
  // If two gts claim the same anchor the stronger overlap wins, ties to the
  // lower gt index.
  std::vector<double> claim_iou(anchors.size(), 0.0);
  for (size_t g = 0; g < gts.size(); ++g) {
    double best = 0.0;
    int best_a = -1;
    for (size_t a = 0; a < anchors.size(); ++a) {
      const double v = iou(anchors[a], gts[g]);
      if (v > best) {  // ties resolve to the lowest anchor index
        best = v;
        best_a = int(a);
      }
    }
    if (best_a >= 0 && best > claim_iou[size_t(best_a)]) {
      assign[size_t(best_a)] = int(g);
      claim_iou[size_t(best_a)] = best;
    }
  }
  return assign;
}

double smooth_l1(const std::vector<double>& pred, const std::vector<double>& target, double beta) {
  if (pred.size() != target.size() || pred.empty())
    throw std::invalid_argument("smooth_l1: size mismatch or empty input");
  if (pred.size() % 4 != 0)
    throw std::invalid_argument("smooth_l1: expected 4 coordinates per row");
  if (beta <= 0) throw std::invalid_argument("smooth_l1: beta must be positive");
  double acc = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    const double ad = std::abs(d);
    acc += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  return acc / double(pred.size() / 4);
}

}  // namespace metadet
