#include "metadet/meta_rpn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace metadet {

namespace {

Tensor gauss_conv(int k, int cin, int cout, double std, Rng& rng) {
  Tensor w({k, k, cin, cout});
  for (int64_t i = 0; i < w.size(); ++i) w[i] = float(rng.normal() * std);
  return w;
}

Tensor he_conv(int k, int cin, int cout, Rng& rng) {
  return gauss_conv(k, cin, cout, std::sqrt(2.0 / (double(k) * k * cin)), rng);
}

}  // namespace

void init_meta_rpn(ParamStore& params, const MetaRpnConfig& cfg, int in_channels, Rng& rng) {
  int c = in_channels;
  int cf = cfg.branch_channels > 0 ? cfg.branch_channels : c;
  int a = cfg.anchors_per_cell();
  params.add("meta_rpn.anchor.w", he_conv(3, c, c, rng));
  params.add("meta_rpn.anchor.b", Tensor({c}));
  params.add("meta_rpn.mult.w", he_conv(1, c, cf, rng));
  params.add("meta_rpn.mult.b", Tensor({cf}));
  params.add("meta_rpn.sub.w", he_conv(1, c, cf, rng));
  params.add("meta_rpn.sub.b", Tensor({cf}));
  params.add("meta_rpn.cat.w", he_conv(1, 2 * c, cf, rng));
  params.add("meta_rpn.cat.b", Tensor({cf}));
  int fused = cfg.fused_channels(c);
  params.add("meta_rpn.cls.w", gauss_conv(1, fused, a, 0.01, rng));
  params.add("meta_rpn.cls.b", Tensor({a}));
  params.add("meta_rpn.reg.w", gauss_conv(1, fused, 4 * a, 0.01, rng));
  params.add("meta_rpn.reg.b", Tensor({4 * a}));
}

template <typename T>
VarT<T> fuse_features(Binder<T>& b, VarT<T> f_q, VarT<T> f_pool, const MetaRpnConfig& cfg) {
  auto& tape = b.tape();
  const auto& qs = tape.val(f_q).shape;
  const auto& ps = tape.val(f_pool).shape;
  if (qs.size() != 3) throw std::invalid_argument("fuse: query map must be {H,W,C}");
  if (ps.size() != 1 || ps[0] != qs[2])
    throw std::invalid_argument("fuse: prototype channels " + tape.val(f_pool).shape_str() +
                                " do not match query map " + tape.val(f_q).shape_str());
  if (!cfg.use_mult && !cfg.use_sub && !cfg.use_cat)
    throw std::invalid_argument("fuse: all branches disabled");

  VarT<T> bc = tape.broadcast_spatial(f_pool, qs[0], qs[1]);
  VarT<T> out;
  auto append = [&](VarT<T> branch) { out = out.valid() ? tape.concat_channels(out, branch) : branch; };
  if (cfg.use_mult) {
    VarT<T> in = cfg.mult_literal_sub ? tape.sub(f_q, bc) : tape.mul(f_q, bc);
    append(tape.relu(tape.conv2d(in, b("meta_rpn.mult.w"), b("meta_rpn.mult.b"), 1, 0)));
  }
  if (cfg.use_sub) {
    VarT<T> in = tape.sub(f_q, bc);
    append(tape.relu(tape.conv2d(in, b("meta_rpn.sub.w"), b("meta_rpn.sub.b"), 1, 0)));
  }
  if (cfg.use_cat) {
    VarT<T> in = tape.concat_channels(f_q, bc);
    append(tape.relu(tape.conv2d(in, b("meta_rpn.cat.w"), b("meta_rpn.cat.b"), 1, 0)));
  }
  return out;
}

template <typename T>
RpnOut<T> meta_rpn_forward(Binder<T>& b, VarT<T> query_map, VarT<T> f_pool,
                           const MetaRpnConfig& cfg) {
  auto& tape = b.tape();
  VarT<T> x = tape.relu(tape.conv2d(query_map, b("meta_rpn.anchor.w"), b("meta_rpn.anchor.b"), 1, 1));
  VarT<T> fused = fuse_features(b, x, f_pool, cfg);
  RpnOut<T> out;
  out.logits = tape.conv2d(fused, b("meta_rpn.cls.w"), b("meta_rpn.cls.b"), 1, 0);
  out.deltas = tape.conv2d(fused, b("meta_rpn.reg.w"), b("meta_rpn.reg.b"), 1, 0);
  return out;
}

void init_attn_rpn(ParamStore& params, const MetaRpnConfig& cfg, int in_channels, Rng& rng) {
  int c = in_channels;
  int a = cfg.anchors_per_cell();
  params.add("attn_rpn.anchor.w", he_conv(3, c, c, rng));
  params.add("attn_rpn.anchor.b", Tensor({c}));
  params.add("attn_rpn.cls.w", gauss_conv(1, c, a, 0.01, rng));
  params.add("attn_rpn.cls.b", Tensor({a}));
  params.add("attn_rpn.reg.w", gauss_conv(1, c, 4 * a, 0.01, rng));
  params.add("attn_rpn.reg.b", Tensor({4 * a}));
}

template <typename T>
RpnOut<T> attn_rpn_forward(Binder<T>& b, VarT<T> query_map, VarT<T> f_pool,
                           const MetaRpnConfig&) {
  auto& tape = b.tape();
  const auto& qs = tape.val(query_map).shape;
  VarT<T> x = tape.relu(tape.conv2d(query_map, b("attn_rpn.anchor.w"), b("attn_rpn.anchor.b"), 1, 1));
  VarT<T> att = tape.mul(x, tape.broadcast_spatial(f_pool, qs[0], qs[1]));
  RpnOut<T> out;
  out.logits = tape.conv2d(att, b("attn_rpn.cls.w"), b("attn_rpn.cls.b"), 1, 0);
  out.deltas = tape.conv2d(att, b("attn_rpn.reg.w"), b("attn_rpn.reg.b"), 1, 0);
  return out;
}

std::vector<Proposal> select_proposals(const Tensor& logits, const Tensor& deltas,
                                       const std::vector<Box>& anchors, int img_w, int img_h,
                                       const MetaRpnConfig& cfg) {
  const int A = cfg.anchors_per_cell();
  if (logits.ndim() != 3 || logits.dim(2) != A)
    throw std::invalid_argument("select_proposals: logits must be {H,W,A}");
  if (deltas.shape != std::vector<int>{logits.dim(0), logits.dim(1), 4 * A})
    throw std::invalid_argument("select_proposals: deltas must be {H,W,4A}");
  const int64_t n = int64_t(logits.dim(0)) * logits.dim(1) * A;
  if (int64_t(anchors.size()) != n)
    throw std::invalid_argument("select_proposals: anchor count mismatch");

  // Flat anchor index ((h*W + w)*A + a) lines up with the head channel
  // layout: logit channel a, delta channels 4a..4a+3.
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t i, int64_t j) { return logits[i] > logits[j]; });
  if (int64_t(order.size()) > cfg.pre_nms_k) order.resize(size_t(cfg.pre_nms_k));

  std::vector<Box> boxes;
  std::vector<double> scores;
  for (int64_t idx : order) {
    Delta d{std::clamp(double(deltas[idx * 4 + 0]), -cfg.delta_clamp, cfg.delta_clamp),
            std::clamp(double(deltas[idx * 4 + 1]), -cfg.delta_clamp, cfg.delta_clamp),
            std::clamp(double(deltas[idx * 4 + 2]), -cfg.delta_clamp, cfg.delta_clamp),
            std::clamp(double(deltas[idx * 4 + 3]), -cfg.delta_clamp, cfg.delta_clamp)};
    Box box = clip_box(decode_box(d, anchors[size_t(idx)]), img_w, img_h);
    if (box.degenerate()) continue;
    boxes.push_back(box);
    scores.push_back(1.0 / (1.0 + std::exp(-double(logits[idx]))));
  }

  std::vector<int> kept = nms(boxes, scores, cfg.nms_iou);
  if (int(kept.size()) > cfg.post_nms_k) kept.resize(size_t(cfg.post_nms_k));
  std::vector<Proposal> out;
  out.reserve(kept.size());
  for (int k : kept) out.push_back({boxes[size_t(k)], scores[size_t(k)]});
  return out;
}

namespace {

std::vector<Proposal> run_proposals(const ParamStore& params, const MetaRpnConfig& cfg,
                                    const Tensor& query_map, const ClassPrototype& proto,
                                    int img_w, int img_h, bool attn_baseline) {
  Tape tape(false);
  FBinder b(tape, params.tensors);
  Var q = tape.input(query_map);
  Var p = tape.input(proto.f_pool);
  RpnOut<float> out =
      attn_baseline ? attn_rpn_forward(b, q, p, cfg) : meta_rpn_forward(b, q, p, cfg);
  std::vector<Box> anchors = generate_anchors(query_map.dim(0), query_map.dim(1), cfg.anchors);
  return select_proposals(tape.val(out.logits), tape.val(out.deltas), anchors, img_w, img_h, cfg);
}

}  // namespace

std::vector<Proposal> generate_proposals(const ParamStore& params, const MetaRpnConfig& cfg,
                                         const Tensor& query_map, const ClassPrototype& proto,
                                         int img_w, int img_h) {
  return run_proposals(params, cfg, query_map, proto, img_w, img_h, false);
}

std::vector<Proposal> generate_proposals_attn(const ParamStore& params, const MetaRpnConfig& cfg,
                                              const Tensor& query_map,
                                              const ClassPrototype& proto, int img_w, int img_h) {
  return run_proposals(params, cfg, query_map, proto, img_w, img_h, true);
}

template <typename T>
VarT<T> rpn_loss_graph(TapeT<T>& tape, const RpnOut<T>& out, const std::vector<int64_t>& pos,
                       const std::vector<int64_t>& neg, const std::vector<Delta>& pos_targets,
                       double beta) {
  if (pos.empty() && neg.empty())
    throw std::invalid_argument("rpn_loss: at least one anchor must be sampled");
  if (pos_targets.size() != pos.size())
    throw std::invalid_argument("rpn_loss: one delta target per positive anchor required");

  std::vector<int64_t> idx = pos;
  idx.insert(idx.end(), neg.begin(), neg.end());
  TensorT<T> labels({int(idx.size())});
  for (size_t i = 0; i < pos.size(); ++i) labels[int64_t(i)] = T(1);
  VarT<T> loss = tape.bce_with_logits(tape.gather(out.logits, idx), labels);

  if (!pos.empty()) {
    // Delta channels 4a..4a+3 of anchor a sit at flat offsets 4a..4a+3.
    std::vector<int64_t> didx;
    didx.reserve(pos.size() * 4);
    for (int64_t a : pos)
      for (int64_t k = 0; k < 4; ++k) didx.push_back(4 * a + k);
    TensorT<T> targets({int(didx.size())});
    for (size_t i = 0; i < pos.size(); ++i) {
      const Delta& d = pos_targets[i];
      targets[int64_t(i) * 4 + 0] = T(d.tx);
      targets[int64_t(i) * 4 + 1] = T(d.ty);
      targets[int64_t(i) * 4 + 2] = T(d.tw);
      targets[int64_t(i) * 4 + 3] = T(d.th);
    }
    loss = tape.add(loss, tape.smooth_l1(tape.gather(out.deltas, didx), targets, beta,
                                         int64_t(pos.size())));
  }
  return loss;
}

template VarT<float> rpn_loss_graph<float>(TapeT<float>&, const RpnOut<float>&,
                                           const std::vector<int64_t>&,
                                           const std::vector<int64_t>&, const std::vector<Delta>&,
                                           double);
template VarT<double> rpn_loss_graph<double>(TapeT<double>&, const RpnOut<double>&,
                                             const std::vector<int64_t>&,
                                             const std::vector<int64_t>&,
                                             const std::vector<Delta>&, double);

template VarT<float> fuse_features<float>(Binder<float>&, VarT<float>, VarT<float>,
                                          const MetaRpnConfig&);
template VarT<double> fuse_features<double>(Binder<double>&, VarT<double>, VarT<double>,
                                            const MetaRpnConfig&);
template RpnOut<float> meta_rpn_forward<float>(Binder<float>&, VarT<float>, VarT<float>,
                                               const MetaRpnConfig&);
template RpnOut<double> meta_rpn_forward<double>(Binder<double>&, VarT<double>, VarT<double>,
                                                 const MetaRpnConfig&);
template RpnOut<float> attn_rpn_forward<float>(Binder<float>&, VarT<float>, VarT<float>,
                                               const MetaRpnConfig&);
template RpnOut<double> attn_rpn_forward<double>(Binder<double>&, VarT<double>, VarT<double>,
                                                 const MetaRpnConfig&);

}  // namespace metadet
