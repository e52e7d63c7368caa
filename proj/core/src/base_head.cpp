#include "metadet/base_head.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace metadet {

namespace {

Tensor gauss(std::vector<int> shape, double std, Rng& rng) {
  Tensor w(std::move(shape));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = float(rng.normal() * std);
  return w;
}

}  // namespace

MetaRpnConfig BaseHeadConfig::proposal_cfg() const {
  MetaRpnConfig p;
  p.anchors = anchors;
  p.pre_nms_k = pre_nms_k;
  p.nms_iou = rpn_nms_iou;
  p.post_nms_k = post_nms_k;
  p.delta_clamp = delta_clamp;
  return p;
}

MetaClassifierConfig BaseHeadConfig::roi_cfg() const {
  MetaClassifierConfig r;
  r.roi_size = roi_size;
  r.roi_samples = roi_samples;
  return r;
}

void init_base_head(ParamStore& params, const BaseHeadConfig& cfg, const BackboneConfig& bb,
                    int num_base_classes, Rng& rng) {
  if (num_base_classes < 1) throw std::invalid_argument("base_head: need at least one class");
  const int c1 = bb.stage1_channels(), c2 = bb.stage2_channels();
  const int a = cfg.anchors_per_cell();
  const int k = num_base_classes + 1;
  params.add("base_rpn.conv.w",
             gauss({3, 3, c1, c1}, std::sqrt(2.0 / (9.0 * c1)), rng));
  params.add("base_rpn.conv.b", Tensor({c1}));
  params.add("base_rpn.cls.w", gauss({1, 1, c1, a}, 0.01, rng));
  params.add("base_rpn.cls.b", Tensor({a}));
  params.add("base_rpn.reg.w", gauss({1, 1, c1, 4 * a}, 0.01, rng));
  params.add("base_rpn.reg.b", Tensor({4 * a}));
  params.add("base_rcnn.cls.w", gauss({c2, k}, 0.01, rng));
  params.add("base_rcnn.cls.b", Tensor({k}));
  params.add("base_rcnn.reg.w", gauss({c2, 4 * k}, 0.01, rng));
  params.add("base_rcnn.reg.b", Tensor({4 * k}));
}

int base_head_classes(const ParamStore& params) {
  return params.at("base_rcnn.cls.b").dim(0) - 1;
}

template <typename T>
RpnOut<T> base_rpn_forward(Binder<T>& b, VarT<T> stage1_map, const BaseHeadConfig&) {
  auto& tape = b.tape();
  VarT<T> x = tape.relu(tape.conv2d(stage1_map, b("base_rpn.conv.w"), b("base_rpn.conv.b"), 1, 1));
  RpnOut<T> out;
  out.logits = tape.conv2d(x, b("base_rpn.cls.w"), b("base_rpn.cls.b"), 1, 0);
  out.deltas = tape.conv2d(x, b("base_rpn.reg.w"), b("base_rpn.reg.b"), 1, 0);
  return out;
}

template <typename T>
RcnnOut<T> rcnn_forward(Binder<T>& b, VarT<T> stage1_map, const Box& proposal, int stride,
                        const BackboneConfig& bb, const BaseHeadConfig& cfg) {
  auto& tape = b.tape();
  VarT<T> feat = roi_extract_graph(b, stage1_map, proposal, stride, bb, cfg.roi_cfg());
  VarT<T> pooled = tape.global_avg_pool(feat);
  RcnnOut<T> out;
  out.logits = tape.linear(pooled, b("base_rcnn.cls.w"), b("base_rcnn.cls.b"));
  out.deltas = tape.linear(pooled, b("base_rcnn.reg.w"), b("base_rcnn.reg.b"));
  return out;
}

RoiScores classify_roi(const ParamStore& params, const BackboneConfig& bb,
                       const BaseHeadConfig& cfg, const Tensor& stage1_map, const Box& proposal,
                       int stride) {
  Tape tape(false);
  FBinder b(tape, params.tensors);
  RcnnOut<float> out = rcnn_forward(b, tape.input(stage1_map), proposal, stride, bb, cfg);
  const Tensor& z = tape.val(out.logits);
  const Tensor& d = tape.val(out.deltas);

  RoiScores rs;
  rs.probs.resize(size_t(z.size()));
  double mx = z[0];
  for (int64_t i = 1; i < z.size(); ++i) mx = std::max(mx, double(z[i]));
  double den = 0;
  for (int64_t i = 0; i < z.size(); ++i) den += std::exp(double(z[i]) - mx);
  for (int64_t i = 0; i < z.size(); ++i) rs.probs[size_t(i)] = std::exp(double(z[i]) - mx) / den;

  rs.deltas.resize(size_t(z.size()));
  for (int64_t k = 0; k < z.size(); ++k)
    rs.deltas[size_t(k)] =
        Delta{std::clamp(double(d[4 * k + 0]), -cfg.delta_clamp, cfg.delta_clamp),
              std::clamp(double(d[4 * k + 1]), -cfg.delta_clamp, cfg.delta_clamp),
              std::clamp(double(d[4 * k + 2]), -cfg.delta_clamp, cfg.delta_clamp),
              std::clamp(double(d[4 * k + 3]), -cfg.delta_clamp, cfg.delta_clamp)};
  return rs;
}

std::vector<Proposal> generate_base_proposals(const ParamStore& params, const BaseHeadConfig& cfg,
                                              const Tensor& stage1_map, int img_w, int img_h) {
  Tape tape(false);
  FBinder b(tape, params.tensors);
  RpnOut<float> out = base_rpn_forward(b, tape.input(stage1_map), cfg);
  std::vector<Box> anchors = generate_anchors(stage1_map.dim(0), stage1_map.dim(1), cfg.anchors);
  return select_proposals(tape.val(out.logits), tape.val(out.deltas), anchors, img_w, img_h,
                          cfg.proposal_cfg());
}

std::vector<Detection> detect_base(const ParamStore& params, const BackboneConfig& bb,
                                   const BaseHeadConfig& cfg, const Tensor& image,
                                   const std::vector<int>& class_ids) {
  const int n = base_head_classes(params);
  if (int(class_ids.size()) != n)
    throw std::invalid_argument("detect_base: class id map does not match the trained head");
  const int img_h = image.dim(0), img_w = image.dim(1);
  const int stride = bb.total_stride();

  Tape tape(false);
  FBinder b(tape, params.tensors);
  const Tensor& map = tape.val(backbone_stage1(b, tape.input(image), bb));
  std::vector<Proposal> props = generate_base_proposals(params, cfg, map, img_w, img_h);

  std::vector<Detection> raw;
  for (const Proposal& p : props) {
    RoiScores rs = classify_roi(params, bb, cfg, map, p.box, stride);
    for (int k = 1; k <= n; ++k) {
      if (rs.probs[size_t(k)] < cfg.score_threshold) continue;
      Box box = clip_box(decode_box(rs.deltas[size_t(k)], p.box), img_w, img_h);
      if (box.degenerate()) continue;
      raw.push_back(Detection{class_ids[size_t(k - 1)], rs.probs[size_t(k)], box});
    }
  }
  return finalize_detections(std::move(raw), cfg.score_threshold, cfg.nms_iou,
                             cfg.max_detections);
}

template <typename T>
VarT<T> rcnn_loss_graph(Binder<T>& b, VarT<T> stage1_map, int stride, const BackboneConfig& bb,
                        const BaseHeadConfig& cfg, const std::vector<RoiSample>& rois,
                        double beta) {
  if (rois.empty()) throw std::invalid_argument("rcnn_loss: no rois sampled");
  auto& tape = b.tape();
  const int k = int(tape.val(b("base_rcnn.cls.b")).dim(0)) - 1;

  VarT<T> ce;
  VarT<T> reg;
  int positives = 0;
  for (const RoiSample& r : rois)
    if (r.label > 0) ++positives;

  for (const RoiSample& r : rois) {
    RcnnOut<T> out = rcnn_forward(b, stage1_map, r.box, stride, bb, cfg);
    if (r.label < 0 || r.label > k)
      throw std::invalid_argument("rcnn_loss: label outside the trained class range");
    VarT<T> row = tape.reshape(out.logits, {1, k + 1});
    VarT<T> term = tape.softmax_ce(row, {r.label});
    ce = ce.valid() ? tape.add(ce, term) : term;
    if (r.label > 0) {
      std::vector<int64_t> didx = {4 * r.label, 4 * r.label + 1, 4 * r.label + 2,
                                   4 * r.label + 3};
      TensorT<T> target({4}, {T(r.target.tx), T(r.target.ty), T(r.target.tw), T(r.target.th)});
      VarT<T> huber =
          tape.smooth_l1(tape.gather(out.deltas, didx), target, beta, int64_t(positives));
      reg = reg.valid() ? tape.add(reg, huber) : huber;
    }
  }
  VarT<T> loss = tape.scale_const(ce, 1.0 / double(rois.size()));
  if (reg.valid()) loss = tape.add(loss, reg);
  return loss;
}

template RpnOut<float> base_rpn_forward<float>(Binder<float>&, VarT<float>,
                                               const BaseHeadConfig&);
template RpnOut<double> base_rpn_forward<double>(Binder<double>&, VarT<double>,
                                                 const BaseHeadConfig&);
template RcnnOut<float> rcnn_forward<float>(Binder<float>&, VarT<float>, const Box&, int,
                                            const BackboneConfig&, const BaseHeadConfig&);
template RcnnOut<double> rcnn_forward<double>(Binder<double>&, VarT<double>, const Box&, int,
                                              const BackboneConfig&, const BaseHeadConfig&);
template VarT<float> rcnn_loss_graph<float>(Binder<float>&, VarT<float>, int,
                                            const BackboneConfig&, const BaseHeadConfig&,
                                            const std::vector<RoiSample>&, double);
template VarT<double> rcnn_loss_graph<double>(Binder<double>&, VarT<double>, int,
                                              const BackboneConfig&, const BaseHeadConfig&,
                                              const std::vector<RoiSample>&, double);

}  // namespace metadet
