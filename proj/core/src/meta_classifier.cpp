#include "metadet/meta_classifier.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "metadet/image.hpp"

namespace metadet {

namespace {

Tensor gauss(std::vector<int> shape, double std, Rng& rng) {
  Tensor w(std::move(shape));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = float(rng.normal() * std);
  return w;
}

Tensor he_conv(int k, int cin, int cout, Rng& rng) {
  return gauss({k, k, cin, cout}, std::sqrt(2.0 / (double(k) * k * cin)), rng);
}

int enabled_branches(const MetaClassifierConfig& cfg) {
  return int(cfg.use_mult) + int(cfg.use_sub) + int(cfg.use_cat);
}

}  // namespace

void init_meta_classifier(ParamStore& params, const MetaClassifierConfig& cfg, int channels,
                          Rng& rng) {
  if (cfg.psi_layers < 1) throw std::invalid_argument("meta_cls: psi_layers must be >= 1");
  int c = channels;
  for (const char* branch : {"mult", "sub", "cat"}) {
    for (int i = 0; i < cfg.psi_layers; ++i) {
      int cin = (i == 0 && std::string(branch) == "cat") ? 2 * c : c;
      std::string p = "meta_cls." + std::string(branch) + "." + std::to_string(i);
      params.add(p + ".w", he_conv(3, cin, c, rng));
      params.add(p + ".b", Tensor({c}));
    }
  }
  int fused = enabled_branches(cfg) * c;
  params.add("meta_cls.score.w", gauss({fused, 1}, 0.01, rng));
  params.add("meta_cls.score.b", Tensor({1}));
  params.add("meta_cls.delta.w", gauss({fused, 4}, 0.01, rng));
  params.add("meta_cls.delta.b", Tensor({4}));
  params.add("meta_cls.gamma1", Tensor({1}));  // zero: residuals start as identity
  params.add("meta_cls.gamma2", Tensor({1}));
}

template <typename T>
VarT<T> roi_pool_graph(TapeT<T>& tape, VarT<T> stage1_map, const Box& box, int stride,
                       const MetaClassifierConfig& cfg) {
  const auto& shape = tape.val(stage1_map).shape;
  if (shape.size() != 3) throw std::invalid_argument("roi_pool: map must be {H,W,C}");
  const int mh = shape[0], mw = shape[1];
  Box c = clip_box(box, double(mw) * stride, double(mh) * stride);
  if (c.degenerate())
    throw std::invalid_argument("roi_pool: box lies outside the image after clipping");

  // Pixel p sits at cell coordinate p/stride - 0.5 (cell centers at
  // integers). Each of the roi_size^2 bins averages samples^2 bilinear taps
  // placed at the centers of a regular sub-grid of the bin.
  const int R = cfg.roi_size, S = cfg.roi_samples;
  const double y1 = c.y1 / stride - 0.5, x1 = c.x1 / stride - 0.5;
  const double bh = c.h() / stride / R, bw = c.w() / stride / R;
  std::vector<double> ys, xs;
  ys.reserve(size_t(R) * R * S * S);
  xs.reserve(size_t(R) * R * S * S);
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < R; ++j)
      for (int sy = 0; sy < S; ++sy)
        for (int sx = 0; sx < S; ++sx) {
          ys.push_back(y1 + (i + (sy + 0.5) / S) * bh);
          xs.push_back(x1 + (j + (sx + 0.5) / S) * bw);
        }
  return tape.bilinear_pool(stage1_map, ys, xs, R, R, S * S);
}

template <typename T>
VarT<T> roi_extract_graph(Binder<T>& b, VarT<T> stage1_map, const Box& box, int stride,
                          const BackboneConfig& bb, const MetaClassifierConfig& cfg) {
  VarT<T> pooled = roi_pool_graph(b.tape(), stage1_map, box, stride, cfg);
  return backbone_stage2(b, pooled, bb);
}

template <typename T>
VarT<T> prototype_head_graph(Binder<T>& b, VarT<T> f_c, int stride, const BackboneConfig& bb,
                             const MetaClassifierConfig& cfg) {
  const auto& s = b.tape().val(f_c).shape;
  Box full{0.0, 0.0, double(s[1]) * stride, double(s[0]) * stride};
  VarT<T> pooled = roi_pool_graph(b.tape(), f_c, full, stride, cfg);
  return backbone_stage2(b, pooled, bb);
}

template <typename T>
PairOut<T> classify_pair_graph(Binder<T>& b, VarT<T> f_p, VarT<T> f_hat_c,
                               const MetaClassifierConfig& cfg, PairVars<T>* expose) {
  auto& tape = b.tape();
  const auto& ps = tape.val(f_p).shape;
  if (ps.size() != 3 || tape.val(f_hat_c).shape != ps)
    throw std::invalid_argument("classify_pair: feature shapes must match, got " +
                                tape.val(f_p).shape_str() + " vs " +
                                tape.val(f_hat_c).shape_str());
  if (!cfg.use_mult && !cfg.use_sub && !cfg.use_cat)
    throw std::invalid_argument("classify_pair: all branches disabled");
  const int H = ps[0], W = ps[1], C = ps[2];
  const int n = H * W;

  VarT<T> f_tilde_c = f_hat_c;
  VarT<T> f_tilde_p = f_p;
  if (cfg.use_alignment) {
    VarT<T> p_flat = tape.reshape(f_p, {n, C});
    VarT<T> c_flat = tape.reshape(f_hat_c, {n, C});
    VarT<T> p_emb = cfg.cosine_affinity ? tape.unit_rows(p_flat) : p_flat;
    VarT<T> c_emb = cfg.cosine_affinity ? tape.unit_rows(c_flat) : c_flat;
    VarT<T> A = tape.matmul(p_emb, tape.transpose2d(c_emb));
    VarT<T> a_norm = tape.softmax_axis(A, 1);
    VarT<T> f_bar = tape.reshape(tape.matmul(a_norm, c_flat), {H, W, C});
    if (expose) {
      expose->affinity = A;
      expose->a_norm = a_norm;
      expose->f_bar = f_bar;
    }
    if (cfg.use_fg_attention) {
      VarT<T> mask = tape.reshape(tape.fg_mask(A), {H, W});
      if (expose) expose->mask = mask;
      VarT<T> mc = tape.broadcast_channel(mask, C);
      VarT<T> grave_c = tape.mul(mc, f_bar);
      VarT<T> grave_p = tape.mul(mc, f_p);
      f_tilde_c = tape.add(tape.scale_var(grave_c, b("meta_cls.gamma1")), f_hat_c);
      f_tilde_p = tape.add(tape.scale_var(grave_p, b("meta_cls.gamma2")), f_p);
    } else {
      // Alignment-only: residual over the aligned prototype, proposal as-is.
      f_tilde_c = tape.add(tape.scale_var(f_bar, b("meta_cls.gamma1")), f_hat_c);
    }
  }
  if (expose) {
    expose->f_tilde_c = f_tilde_c;
    expose->f_tilde_p = f_tilde_p;
  }

  auto psi = [&](const char* branch, VarT<T> in) {
    VarT<T> x = in;
    for (int i = 0; i < cfg.psi_layers; ++i) {
      std::string p = "meta_cls." + std::string(branch) + "." + std::to_string(i);
      x = tape.relu(tape.conv2d(x, b(p + ".w"), b(p + ".b"), 1, 1));
    }
    return x;
  };

  VarT<T> fused;
  auto append = [&](VarT<T> v) { fused = fused.valid() ? tape.concat_channels(fused, v) : v; };
  if (cfg.use_mult) append(psi("mult", tape.mul(f_tilde_c, f_tilde_p)));
  if (cfg.use_sub) append(psi("sub", tape.sub(f_tilde_c, f_tilde_p)));
  if (cfg.use_cat) append(psi("cat", tape.concat_channels(f_tilde_c, f_tilde_p)));

  VarT<T> pooled = tape.global_avg_pool(fused);
  PairOut<T> out;
  out.logit = tape.linear(pooled, b("meta_cls.score.w"), b("meta_cls.score.b"));
  out.deltas = tape.linear(pooled, b("meta_cls.delta.w"), b("meta_cls.delta.b"));
  return out;
}

PairResult classify_pair(const ParamStore& params, const MetaClassifierConfig& cfg,
                         const Tensor& f_p, const Tensor& f_hat_c, AlignmentState* state) {
  Tape tape(false);
  FBinder b(tape, params.tensors);
  PairVars<float> vars;
  PairOut<float> out = classify_pair_graph(b, tape.input(f_p), tape.input(f_hat_c), cfg,
                                           state ? &vars : nullptr);
  if (state) {
    if (vars.affinity.valid()) {
      state->affinity = tape.val(vars.affinity);
      state->a_norm = tape.val(vars.a_norm);
      state->f_bar_c = tape.val(vars.f_bar);
    }
    if (vars.mask.valid()) state->mask = tape.val(vars.mask);
    state->gamma1 = params.at("meta_cls.gamma1")[0];
    state->gamma2 = params.at("meta_cls.gamma2")[0];
  }
  PairResult r;
  r.score = 1.0 / (1.0 + std::exp(-double(tape.val(out.logit)[0])));
  const Tensor& d = tape.val(out.deltas);
  r.delta = Delta{std::clamp(double(d[0]), -cfg.delta_clamp, cfg.delta_clamp),
                  std::clamp(double(d[1]), -cfg.delta_clamp, cfg.delta_clamp),
                  std::clamp(double(d[2]), -cfg.delta_clamp, cfg.delta_clamp),
                  std::clamp(double(d[3]), -cfg.delta_clamp, cfg.delta_clamp)};
  return r;
}

Tensor prototype_head(const ParamStore& params, const BackboneConfig& bb,
                      const MetaClassifierConfig& cfg, const Tensor& f_c, int stride) {
  Tape tape(false);
  FBinder b(tape, params.tensors);
  return tape.val(prototype_head_graph(b, tape.input(f_c), stride, bb, cfg));
}

Tensor roi_extract(const ParamStore& params, const BackboneConfig& bb,
                   const MetaClassifierConfig& cfg, const Tensor& stage1_map, const Box& box,
                   int stride) {
  Tape tape(false);
  FBinder b(tape, params.tensors);
  return tape.val(roi_extract_graph(b, tape.input(stage1_map), box, stride, bb, cfg));
}

void export_alignment(const AlignmentState& state, const std::string& anorm_path,
                      const std::string& mask_path) {
  if (state.a_norm.size() > 0) write_pgm(anorm_path, state.a_norm);
  if (state.mask.size() > 0) write_pgm(mask_path, state.mask);
}

template VarT<float> roi_pool_graph<float>(TapeT<float>&, VarT<float>, const Box&, int,
                                           const MetaClassifierConfig&);
template VarT<double> roi_pool_graph<double>(TapeT<double>&, VarT<double>, const Box&, int,
                                             const MetaClassifierConfig&);
template VarT<float> roi_extract_graph<float>(Binder<float>&, VarT<float>, const Box&, int,
                                              const BackboneConfig&, const MetaClassifierConfig&);
template VarT<double> roi_extract_graph<double>(Binder<double>&, VarT<double>, const Box&, int,
                                                const BackboneConfig&,
                                                const MetaClassifierConfig&);
template VarT<float> prototype_head_graph<float>(Binder<float>&, VarT<float>, int,
                                                 const BackboneConfig&,
                                                 const MetaClassifierConfig&);
template VarT<double> prototype_head_graph<double>(Binder<double>&, VarT<double>, int,
                                                   const BackboneConfig&,
                                                   const MetaClassifierConfig&);
template PairOut<float> classify_pair_graph<float>(Binder<float>&, VarT<float>, VarT<float>,
                                                   const MetaClassifierConfig&, PairVars<float>*);
template PairOut<double> classify_pair_graph<double>(Binder<double>&, VarT<double>, VarT<double>,
                                                     const MetaClassifierConfig&,
                                                     PairVars<double>*);

}  // namespace metadet
