#include "metadet/training.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "metadet/image.hpp"

namespace metadet {

namespace {

template <typename T>
VarT<T> zero_scalar(TapeT<T>& tape) {
  return tape.input(TensorT<T>::scalar(T(0)));
}

template <typename T>
VarT<T> accumulate(TapeT<T>& tape, VarT<T> acc, VarT<T> term) {
  return acc.valid() ? tape.add(acc, term) : term;
}

template <typename T>
TensorT<T> load_image_tensor(const Dataset& ds, int image_id) {
  return image_to_tensor(ds.load_image(image_id)).template cast<T>();
}

std::vector<Box> gt_boxes_for(const Dataset& ds, const std::vector<int>& ann_ids) {
  std::vector<Box> out;
  out.reserve(ann_ids.size());
  for (int a : ann_ids) out.push_back(ds.annotation(a).box);
  return out;
}

}  // namespace

double StepSchedule::lr_at(int iter) const {
  double v = lr;
  for (double f : decay_at)
    if (double(iter) >= f * double(iterations)) v *= 0.1;
  return v;
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
  std::string out = "iteration,rpn_loss,cls_loss,total\n";
  char line[128];
  for (const LossRow& r : rows) {
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f\n", r.iteration, r.rpn, r.cls, r.total);
    out += line;
  }
  write_text_file(path, out);
}

template <typename T>
VarT<T> pair_loss_graph(TapeT<T>& tape, const std::vector<PairOut<T>>& pairs,
                        const std::vector<int>& labels, const std::vector<Delta>& pos_targets,
                        double beta) {
  if (pairs.empty()) throw std::invalid_argument("pair_loss: no pairs sampled");
  if (labels.size() != pairs.size())
    throw std::invalid_argument("pair_loss: one label per pair required");
  int64_t positives = 0;
  for (int l : labels) positives += (l != 0);
  if (size_t(positives) != pos_targets.size())
    throw std::invalid_argument("pair_loss: one delta target per positive pair required");

  VarT<T> bce;
  VarT<T> reg;
  size_t ti = 0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    TensorT<T> target({1}, {T(labels[i] != 0)});
    bce = accumulate(tape, bce, tape.bce_with_logits(pairs[i].logit, std::move(target)));
    if (labels[i] != 0) {
      const Delta& d = pos_targets[ti++];
      TensorT<T> t({4}, {T(d.tx), T(d.ty), T(d.tw), T(d.th)});
      reg = accumulate(tape, reg,
                       tape.smooth_l1(pairs[i].deltas, std::move(t), beta, positives));
    }
  }
  VarT<T> loss = tape.scale_const(bce, 1.0 / double(pairs.size()));
  if (reg.valid()) loss = tape.add(loss, reg);
  return loss;
}

template <typename T>
EpisodeLosses<T> episode_loss_graph(Binder<T>& b, const Dataset& ds, const Episode& ep,
                                    const ModelConfig& mc, const TrainConfig& tc, Rng& rng) {
  auto& tape = b.tape();
  const int stride = mc.backbone.total_stride();

  std::map<int, PrototypeVars<T>> protos;
  std::map<int, VarT<T>> f_hat;
  for (int cls : ep.class_ids) {
    std::vector<TensorT<T>> crops;
    for (int ann_id : ep.support_anns.at(cls)) {
      const Annotation& ann = ds.annotation(ann_id);
      Tensor img = image_to_tensor(ds.load_image(ann.image_id));
      crops.push_back(
          crop_support(img, ann.box, mc.support_context, mc.support_size).template cast<T>());
    }
    protos[cls] = prototype_graph(b, crops, mc.backbone);
    f_hat[cls] = prototype_head_graph(b, protos[cls].f_c, stride, mc.backbone, mc.cls);
  }

  VarT<T> rpn_acc, cls_acc;
  int rpn_n = 0, cls_n = 0;
  for (int qimg : ep.query_images) {
    const ImageRec& rec = ds.image(qimg);
    VarT<T> qmap = backbone_stage1(b, tape.input(load_image_tensor<T>(ds, qimg)), mc.backbone);
    const TensorT<T>& qv = tape.val(qmap);
    std::vector<Box> anchors = generate_anchors(qv.dim(0), qv.dim(1), mc.rpn.anchors);

    for (int cls : ep.class_ids) {
      std::vector<Box> gts = gt_boxes_for(ds, episode_query_anns(ds, ep, qimg, cls));

      RpnOut<T> out = mc.rpn_variant == "attention-baseline"
                          ? attn_rpn_forward(b, qmap, protos[cls].f_pool, mc.rpn)
                          : meta_rpn_forward(b, qmap, protos[cls].f_pool, mc.rpn);
      std::vector<int> labels = match_anchors(anchors, gts, tc.rpn_pos_iou, tc.rpn_neg_iou);
      PairSample smp = sample_pairs(labels, tc.neg_per_pos, tc.pos_cap, tc.neg_floor, rng);
      if (!smp.pos.empty() || !smp.neg.empty()) {
        std::vector<Delta> targets;
        for (int64_t i : smp.pos)
          targets.push_back(encode_box(gts[size_t(labels[size_t(i)])], anchors[size_t(i)]));
        rpn_acc = accumulate(tape, rpn_acc,
                             rpn_loss_graph(tape, out, smp.pos, smp.neg, targets, tc.beta));
        ++rpn_n;
      }

      // The classifier trains on the current proposals as fixed boxes.
      std::vector<Proposal> props =
          select_proposals(tape.val(out.logits).template cast<float>(),
                           tape.val(out.deltas).template cast<float>(), anchors, rec.width,
                           rec.height, mc.rpn);
      std::vector<Box> rois;
      for (const Proposal& p : props) rois.push_back(p.box);
      if (tc.add_gt_proposals)
        for (const Box& g : gts) rois.push_back(g);

      std::vector<int> rlabels = match_anchors(rois, gts, tc.cls_pos_iou, tc.cls_neg_iou);
      PairSample rs = sample_pairs(rlabels, tc.neg_per_pos, tc.pos_cap, tc.neg_floor, rng);
      std::vector<PairOut<T>> pairs;
      std::vector<int> plabels;
      std::vector<Delta> ptargets;
      auto add_pair = [&](int64_t idx, int label) {
        VarT<T> f_p = roi_extract_graph(b, qmap, rois[size_t(idx)], stride, mc.backbone, mc.cls);
        pairs.push_back(classify_pair_graph(b, f_p, f_hat[cls], mc.cls));
        plabels.push_back(label);
      };
      for (int64_t i : rs.pos) {
        add_pair(i, 1);
        ptargets.push_back(encode_box(gts[size_t(rlabels[size_t(i)])], rois[size_t(i)]));
      }
      for (int64_t i : rs.neg) add_pair(i, 0);
      if (!pairs.empty()) {
        cls_acc = accumulate(tape, cls_acc, pair_loss_graph(tape, pairs, plabels, ptargets,
                                                            tc.beta));
        ++cls_n;
      }
    }
  }

  if (rpn_n == 0 && cls_n == 0)
    throw std::runtime_error("episode produced no training pairs");
  EpisodeLosses<T> out;
  out.rpn = rpn_n ? tape.scale_const(rpn_acc, 1.0 / rpn_n) : zero_scalar(tape);
  out.cls = cls_n ? tape.scale_const(cls_acc, 1.0 / cls_n) : zero_scalar(tape);
  out.total = tape.add(out.rpn, out.cls);
  return out;
}

template <typename T>
EpisodeLosses<T> base_image_loss_graph(Binder<T>& b, const Dataset& ds, int image_id,
                                       const ModelConfig& mc, const TrainConfig& tc,
                                       const std::map<int, int>& class_to_head, Rng& rng,
                                       const std::vector<int>& allowed_anns) {
  auto& tape = b.tape();
  const int stride = mc.backbone.total_stride();
  const ImageRec& rec = ds.image(image_id);

  std::set<int> allowed(allowed_anns.begin(), allowed_anns.end());
  std::vector<Box> gts;
  std::vector<int> gt_head;  // head class index of each gt
  for (int a : ds.annotations_of_image(image_id)) {
    const Annotation& ann = ds.annotation(a);
    auto it = class_to_head.find(ann.category_id);
    if (it == class_to_head.end()) continue;
    if (!allowed.empty() && !allowed.count(a)) continue;
    gts.push_back(ann.box);
    gt_head.push_back(it->second);
  }

  VarT<T> map = backbone_stage1(b, tape.input(load_image_tensor<T>(ds, image_id)), mc.backbone);
  const TensorT<T>& mv = tape.val(map);
  std::vector<Box> anchors = generate_anchors(mv.dim(0), mv.dim(1), mc.base.anchors);

  RpnOut<T> out = base_rpn_forward(b, map, mc.base);
  std::vector<int> labels = match_anchors(anchors, gts, tc.rpn_pos_iou, tc.rpn_neg_iou);
  PairSample smp = sample_pairs(labels, tc.neg_per_pos, tc.pos_cap, tc.neg_floor, rng);

  EpisodeLosses<T> losses;
  losses.rpn = zero_scalar(tape);
  if (!smp.pos.empty() || !smp.neg.empty()) {
    std::vector<Delta> targets;
    for (int64_t i : smp.pos)
      targets.push_back(encode_box(gts[size_t(labels[size_t(i)])], anchors[size_t(i)]));
    losses.rpn = rpn_loss_graph(tape, out, smp.pos, smp.neg, targets, tc.beta);
  }

  std::vector<Proposal> props = select_proposals(
      tape.val(out.logits).template cast<float>(), tape.val(out.deltas).template cast<float>(),
      anchors, rec.width, rec.height, mc.base.proposal_cfg());
  std::vector<Box> boxes;
  for (const Proposal& p : props) boxes.push_back(p.box);
  if (tc.add_gt_proposals)
    for (const Box& g : gts) boxes.push_back(g);

  std::vector<int> rlabels = match_anchors(boxes, gts, tc.cls_pos_iou, tc.cls_neg_iou);
  PairSample rs = sample_pairs(rlabels, tc.neg_per_pos, tc.pos_cap, tc.neg_floor, rng);
  std::vector<RoiSample> rois;
  for (int64_t i : rs.pos) {
    int g = rlabels[size_t(i)];
    rois.push_back(RoiSample{boxes[size_t(i)], gt_head[size_t(g)],
                             encode_box(gts[size_t(g)], boxes[size_t(i)])});
  }
  for (int64_t i : rs.neg) rois.push_back(RoiSample{boxes[size_t(i)], 0, Delta{}});

  losses.cls = zero_scalar(tape);
  if (!rois.empty())
    losses.cls = rcnn_loss_graph(b, map, stride, mc.backbone, mc.base, rois, tc.beta);
  losses.total = tape.add(losses.rpn, losses.cls);
  return losses;
}

std::map<int, int> base_class_to_head(const Dataset& ds) {
  std::vector<int> ids = ds.fewshot.base_ids;
  std::sort(ids.begin(), ids.end());
  std::map<int, int> out;
  for (size_t i = 0; i < ids.size(); ++i) out[ids[i]] = int(i) + 1;
  return out;
}

namespace {

bool has_prefix(const ParamStore& params, const std::string& prefix) {
  for (const auto& [name, t] : params.tensors)
    if (name.rfind(prefix, 0) == 0) return true;
  return false;
}

LossRow eval_row(const Tape& tape, int it, const EpisodeLosses<float>& l) {
  return LossRow{it, double(tape.val(l.rpn)[0]), double(tape.val(l.cls)[0]),
                 double(tape.val(l.total)[0])};
}

}  // namespace

std::vector<LossRow> run_step1_meta_train(const Dataset& ds, const ModelConfig& mc,
                                          const TrainConfig& tc, ParamStore& params) {
  Rng root(tc.seed);
  if (!has_prefix(params, "backbone.")) {
    Rng init = root.fork(0x1A17);
    init_backbone(params, mc.backbone, init);
  }
  if (mc.rpn_variant == "attention-baseline") {
    if (!has_prefix(params, "attn_rpn.")) {
      Rng init = root.fork(0x1A18);
      init_attn_rpn(params, mc.rpn, mc.backbone.stage1_channels(), init);
    }
  } else if (!has_prefix(params, "meta_rpn.")) {
    Rng init = root.fork(0x1A18);
    init_meta_rpn(params, mc.rpn, mc.backbone.stage1_channels(), init);
  }
  if (!has_prefix(params, "meta_cls.")) {
    Rng init = root.fork(0x1A19);
    init_meta_classifier(params, mc.cls, mc.backbone.stage2_channels(), init);
  }

  Sgd opt;
  std::vector<LossRow> curve;
  curve.reserve(size_t(tc.step1.iterations));
  for (int it = 0; it < tc.step1.iterations; ++it) {
    Rng erng = root.fork(0x57E1000 + uint64_t(it));
    Episode ep = sample_episode(ds, tc.n_way, tc.k_shot, tc.n_queries, erng);
    Tape tape(true);
    FBinder b(tape, params.tensors);
    EpisodeLosses<float> l = episode_loss_graph(b, ds, ep, mc, tc, erng);
    tape.backward(l.total);
    opt.step(params, b.grads(),
             SgdConfig{tc.step1.lr_at(it), tc.step1.momentum, tc.step1.weight_decay});
    curve.push_back(eval_row(tape, it, l));
  }
  return curve;
}

std::vector<LossRow> run_step2_base_head(const Dataset& ds, const ModelConfig& mc,
                                         const TrainConfig& tc, ParamStore& params) {
  if (!has_prefix(params, "backbone."))
    throw std::runtime_error("base-head training requires trained first-step parameters");
  Rng root(tc.seed);
  std::map<int, int> to_head = base_class_to_head(ds);
  if (!has_prefix(params, "base_rpn.")) {
    Rng init = root.fork(0x2B15);
    init_base_head(params, mc.base, mc.backbone, int(to_head.size()), init);
  }

  std::vector<int> train_images = ds.images_in_split("train");
  std::sort(train_images.begin(), train_images.end());
  if (train_images.empty()) throw std::runtime_error("no training images");

  Sgd opt;
  std::vector<LossRow> curve;
  curve.reserve(size_t(tc.step2.iterations));
  for (int it = 0; it < tc.step2.iterations; ++it) {
    Rng erng = root.fork(0x57E2000 + uint64_t(it));
    int image_id = train_images[size_t(erng.uniform_int(0, int64_t(train_images.size()) - 1))];
    Tape tape(true);
    FBinder b(tape, params.tensors, {"backbone."});
    EpisodeLosses<float> l = base_image_loss_graph(b, ds, image_id, mc, tc, to_head, erng);
    tape.backward(l.total);
    opt.step(params, b.grads(),
             SgdConfig{tc.step2.lr_at(it), tc.step2.momentum, tc.step2.weight_decay});
    curve.push_back(eval_row(tape, it, l));
  }
  return curve;
}

std::vector<LossRow> run_step3_finetune(const Dataset& ds, const ModelConfig& mc,
                                        const TrainConfig& tc, int k, ParamStore& params) {
  if (!has_prefix(params, "meta_cls."))
    throw std::runtime_error("fine-tuning requires trained first-step parameters");
  Rng root(tc.seed);

  auto shot = ds.fewshot.supports.find(k);
  if (shot == ds.fewshot.supports.end())
    throw std::runtime_error("no support list for the requested shot count");
  int n_way = std::min(tc.n_way, int(shot->second.size()));

  // The balanced base annotations feed the optional detector-head pass.
  std::map<int, int> to_head = base_class_to_head(ds);
  std::vector<int> base_anns;
  for (const auto& [cls, anns] : shot->second)
    if (to_head.count(cls))
      for (int a : anns) base_anns.push_back(a);
  std::sort(base_anns.begin(), base_anns.end());
  bool tune_base = tc.finetune_base_head && has_prefix(params, "base_rpn.") &&
                   !base_anns.empty();

  Sgd opt;
  std::vector<LossRow> curve;
  curve.reserve(size_t(tc.step3.iterations));
  for (int it = 0; it < tc.step3.iterations; ++it) {
    Rng erng = root.fork(0x57E3000 + uint64_t(it));
    Episode ep = sample_finetune_episode(ds, n_way, k, tc.n_queries, erng);
    Tape tape(true);
    FBinder b(tape, params.tensors, {"backbone."});
    EpisodeLosses<float> l = episode_loss_graph(b, ds, ep, mc, tc, erng);
    VarT<float> total = l.total;
    if (tune_base) {
      int ann = base_anns[size_t(erng.uniform_int(0, int64_t(base_anns.size()) - 1))];
      EpisodeLosses<float> bl = base_image_loss_graph(
          b, ds, ds.annotation(ann).image_id, mc, tc, to_head, erng, base_anns);
      total = tape.add(total, bl.total);
    }
    tape.backward(total);
    opt.step(params, b.grads(),
             SgdConfig{tc.step3.lr_at(it), tc.step3.momentum, tc.step3.weight_decay});
    curve.push_back(eval_row(tape, it, l));
  }
  return curve;
}

template VarT<float> pair_loss_graph<float>(TapeT<float>&, const std::vector<PairOut<float>>&,
                                            const std::vector<int>&, const std::vector<Delta>&,
                                            double);
template VarT<double> pair_loss_graph<double>(TapeT<double>&,
                                              const std::vector<PairOut<double>>&,
                                              const std::vector<int>&, const std::vector<Delta>&,
                                              double);
template EpisodeLosses<float> episode_loss_graph<float>(Binder<float>&, const Dataset&,
                                                        const Episode&, const ModelConfig&,
                                                        const TrainConfig&, Rng&);
template EpisodeLosses<double> episode_loss_graph<double>(Binder<double>&, const Dataset&,
                                                          const Episode&, const ModelConfig&,
                                                          const TrainConfig&, Rng&);
template EpisodeLosses<float> base_image_loss_graph<float>(Binder<float>&, const Dataset&, int,
                                                           const ModelConfig&, const TrainConfig&,
                                                           const std::map<int, int>&, Rng&,
                                                           const std::vector<int>&);
template EpisodeLosses<double> base_image_loss_graph<double>(Binder<double>&, const Dataset&,
                                                             int, const ModelConfig&,
                                                             const TrainConfig&,
                                                             const std::map<int, int>&, Rng&,
                                                             const std::vector<int>&);

}  // namespace metadet
