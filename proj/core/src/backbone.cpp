#include "metadet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace metadet {

namespace {

Tensor he_conv(int k, int cin, int cout, Rng& rng) {
  Tensor w({k, k, cin, cout});
  double std = std::sqrt(2.0 / (double(k) * k * cin));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = float(rng.normal() * std);
  return w;
}

}  // namespace

void init_backbone(ParamStore& params, const BackboneConfig& cfg, Rng& rng) {
  int cin = 3;
  for (size_t i = 0; i < cfg.stage1.size(); ++i) {
    const auto& l = cfg.stage1[i];
    params.add("backbone.s1." + std::to_string(i) + ".w", he_conv(3, cin, l.channels, rng));
    params.add("backbone.s1." + std::to_string(i) + ".b", Tensor({l.channels}));
    cin = l.channels;
  }
  for (size_t i = 0; i < cfg.stage2.size(); ++i) {
    params.add("backbone.s2." + std::to_string(i) + ".w", he_conv(3, cin, cfg.stage2[i], rng));
    params.add("backbone.s2." + std::to_string(i) + ".b", Tensor({cfg.stage2[i]}));
    cin = cfg.stage2[i];
  }
}

template <typename T>
VarT<T> backbone_stage1(Binder<T>& b, VarT<T> image, const BackboneConfig& cfg) {
  auto& tape = b.tape();
  const auto& shape = tape.val(image).shape;
  if (shape.size() != 3 || shape[2] != 3)
    throw std::invalid_argument("backbone: expected an {H,W,3} image");
  int stride = cfg.total_stride();
  if (shape[0] % stride != 0 || shape[1] % stride != 0)
    throw std::invalid_argument("backbone: image extents " + tape.val(image).shape_str() +
                                " not divisible by stride " + std::to_string(stride));
  VarT<T> x = image;
  for (size_t i = 0; i < cfg.stage1.size(); ++i) {
    std::string p = "backbone.s1." + std::to_string(i);
    x = tape.relu(tape.conv2d(x, b(p + ".w"), b(p + ".b"), cfg.stage1[i].stride, 1));
  }
  return x;
}

template <typename T>
VarT<T> backbone_stage2(Binder<T>& b, VarT<T> feat, const BackboneConfig& cfg) {
  auto& tape = b.tape();
  VarT<T> x = feat;
  for (size_t i = 0; i < cfg.stage2.size(); ++i) {
    std::string p = "backbone.s2." + std::to_string(i);
    x = tape.relu(tape.conv2d(x, b(p + ".w"), b(p + ".b"), 1, 1));
  }
  return x;
}

Tensor crop_support(const Tensor& image, const Box& box, double context_factor, int out_size) {
  if (image.ndim() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("crop_support: expected an {H,W,3} image");
  if (context_factor < 1.0) throw std::invalid_argument("crop_support: context_factor < 1");
  if (out_size <= 0) throw std::invalid_argument("crop_support: non-positive out_size");
  const int H = image.dim(0), W = image.dim(1);

  Box big{box.cx() - 0.5 * box.w() * context_factor, box.cy() - 0.5 * box.h() * context_factor,
          box.cx() + 0.5 * box.w() * context_factor, box.cy() + 0.5 * box.h() * context_factor};
  Box c = clip_box(big, W, H);
  if (c.degenerate()) throw std::invalid_argument("crop_support: clipped box has zero area");

  Tensor out({out_size, out_size, 3});
  for (int i = 0; i < out_size; ++i) {
    double sy = c.y1 + (i + 0.5) * c.h() / out_size - 0.5;
    sy = std::clamp(sy, 0.0, double(H - 1));
    int y0 = int(std::floor(sy));
    int y1 = std::min(y0 + 1, H - 1);
    double ty = sy - y0;
    for (int j = 0; j < out_size; ++j) {
      double sx = c.x1 + (j + 0.5) * c.w() / out_size - 0.5;
      sx = std::clamp(sx, 0.0, double(W - 1));
      int x0 = int(std::floor(sx));
      int x1 = std::min(x0 + 1, W - 1);
      double tx = sx - x0;
      for (int ch = 0; ch < 3; ++ch) {
        double v = (1 - ty) * ((1 - tx) * image.at3(y0, x0, ch) + tx * image.at3(y0, x1, ch)) +
                   ty * ((1 - tx) * image.at3(y1, x0, ch) + tx * image.at3(y1, x1, ch));
        out.at3(i, j, ch) = float(v);
      }
    }
  }
  return out;
}

template <typename T>
PrototypeVars<T> prototype_graph(Binder<T>& b, const std::vector<TensorT<T>>& crops,
                                 const BackboneConfig& cfg) {
  if (crops.empty()) throw std::invalid_argument("prototype: empty support list");
  auto& tape = b.tape();
  VarT<T> sum;
  for (const auto& crop : crops) {
    VarT<T> f = backbone_stage1(b, tape.input(crop), cfg);
    sum = sum.valid() ? tape.add(sum, f) : f;
  }
  PrototypeVars<T> out;
  out.f_c = tape.scale_const(sum, 1.0 / double(crops.size()));
  out.f_pool = tape.global_avg_pool(out.f_c);
  return out;
}

ClassPrototype compute_prototype(const ParamStore& params, const BackboneConfig& cfg,
                                 const std::vector<SupportExample>& supports,
                                 double context_factor, int out_size) {
  if (supports.empty()) throw std::invalid_argument("prototype: empty support list");
  std::vector<Tensor> crops;
  crops.reserve(supports.size());
  for (const auto& s : supports) {
    if (s.class_id != supports[0].class_id)
      throw std::invalid_argument("prototype: mixed class ids in one support list");
    crops.push_back(crop_support(s.image, s.box, context_factor, out_size));
  }
  Tape tape(false);
  FBinder b(tape, params.tensors);
  PrototypeVars<float> v = prototype_graph(b, crops, cfg);
  return ClassPrototype{supports[0].class_id, tape.val(v.f_c), tape.val(v.f_pool)};
}

template VarT<float> backbone_stage1<float>(Binder<float>&, VarT<float>, const BackboneConfig&);
template VarT<double> backbone_stage1<double>(Binder<double>&, VarT<double>,
                                              const BackboneConfig&);
template VarT<float> backbone_stage2<float>(Binder<float>&, VarT<float>, const BackboneConfig&);
template VarT<double> backbone_stage2<double>(Binder<double>&, VarT<double>,
                                              const BackboneConfig&);
template PrototypeVars<float> prototype_graph<float>(Binder<float>&, const std::vector<Tensor>&,
                                                     const BackboneConfig&);
template PrototypeVars<double> prototype_graph<double>(Binder<double>&,
                                                       const std::vector<DTensor>&,
                                                       const BackboneConfig&);

}  // namespace metadet
