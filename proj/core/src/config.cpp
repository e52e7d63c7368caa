#include "metadet/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "metadet/util.hpp"

namespace metadet {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw std::invalid_argument("config: " + key + ": " + what);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

// --- value parsers / printers ------------------------------------------

int64_t to_i64(const std::string& key, const std::string& v) {
  int64_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, "not an integer: '" + v + "'");
  return x;
}

double to_f64(const std::string& key, const std::string& v) {
  double x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, "not a number: '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, "not a boolean (true/false): '" + v + "'");
}

std::string fmt_f64(double x) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  (void)ec;
  return std::string(buf, p);
}

template <typename T, typename Fmt>
std::string join(const std::vector<T>& v, Fmt fmt) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt(v[i]);
  }
  return out;
}

// --- key registry --------------------------------------------------------

struct Entry {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

using Registry = std::map<std::string, Entry>;

template <typename Ref>
void reg_int(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) {
              return std::to_string(ref(const_cast<RunConfig&>(rc)));
            },
            [ref](RunConfig& rc, const std::string& k, const std::string& v) {
              ref(rc) = int(to_i64(k, v));
            }};
}

template <typename Ref>
void reg_u64(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) {
              return std::to_string(ref(const_cast<RunConfig&>(rc)));
            },
            [ref](RunConfig& rc, const std::string& k, const std::string& v) {
              int64_t x = to_i64(k, v);
              if (x < 0) bad(k, "must be non-negative");
              ref(rc) = uint64_t(x);
            }};
}

template <typename Ref>
void reg_f64(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) { return fmt_f64(ref(const_cast<RunConfig&>(rc))); },
            [ref](RunConfig& rc, const std::string& k, const std::string& v) {
              ref(rc) = to_f64(k, v);
            }};
}

template <typename Ref>
void reg_bool(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) {
              return ref(const_cast<RunConfig&>(rc)) ? std::string("true") : std::string("false");
            },
            [ref](RunConfig& rc, const std::string& k, const std::string& v) {
              ref(rc) = to_bool(k, v);
            }};
}

template <typename Ref>
void reg_str(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) { return ref(const_cast<RunConfig&>(rc)); },
            [ref](RunConfig& rc, const std::string&, const std::string& v) { ref(rc) = v; }};
}

template <typename Ref>
void reg_ints(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) {
              return join(ref(const_cast<RunConfig&>(rc)),
                          [](int x) { return std::to_string(x); });
            },
            [ref](RunConfig& rc, const std::string& k, const std::string& v) {
              std::vector<int> out;
              for (const std::string& s : split(v, ',')) out.push_back(int(to_i64(k, s)));
              ref(rc) = std::move(out);
            }};
}

template <typename Ref>
void reg_f64s(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) {
              return join(ref(const_cast<RunConfig&>(rc)), fmt_f64);
            },
            [ref](RunConfig& rc, const std::string& k, const std::string& v) {
              std::vector<double> out;
              for (const std::string& s : split(v, ',')) out.push_back(to_f64(k, s));
              ref(rc) = std::move(out);
            }};
}

// Conv stacks as "channels:stride" pairs, e.g. "16:2,32:2,32:2".
template <typename Ref>
void reg_convs(Registry& r, const std::string& key, Ref ref) {
  r[key] = {[ref](const RunConfig& rc) {
              return join(ref(const_cast<RunConfig&>(rc)), [](const ConvSpec& c) {
                return std::to_string(c.channels) + ":" + std::to_string(c.stride);
              });
            },
            [ref](RunConfig& rc, const std::string& k, const std::string& v) {
              std::vector<ConvSpec> out;
              for (const std::string& s : split(v, ',')) {
                size_t colon = s.find(':');
                if (colon == std::string::npos) bad(k, "expected channels:stride, got '" + s + "'");
                out.push_back(ConvSpec{int(to_i64(k, trim(s.substr(0, colon)))),
                                       int(to_i64(k, trim(s.substr(colon + 1))))});
              }
              ref(rc) = std::move(out);
            }};
}

#define REF(expr) [](RunConfig& rc) -> decltype((expr))& { return expr; }

void reg_schedule(Registry& r, const std::string& prefix,
                  std::function<StepSchedule&(RunConfig&)> step) {
  r[prefix + ".iterations"] = {
      [step](const RunConfig& rc) {
        return std::to_string(step(const_cast<RunConfig&>(rc)).iterations);
      },
      [step](RunConfig& rc, const std::string& k, const std::string& v) {
        step(rc).iterations = int(to_i64(k, v));
      }};
  r[prefix + ".lr"] = {
      [step](const RunConfig& rc) { return fmt_f64(step(const_cast<RunConfig&>(rc)).lr); },
      [step](RunConfig& rc, const std::string& k, const std::string& v) {
        step(rc).lr = to_f64(k, v);
      }};
  r[prefix + ".decay_at"] = {
      [step](const RunConfig& rc) {
        return join(step(const_cast<RunConfig&>(rc)).decay_at, fmt_f64);
      },
      [step](RunConfig& rc, const std::string& k, const std::string& v) {
        std::vector<double> out;
        for (const std::string& s : split(v, ',')) out.push_back(to_f64(k, s));
        step(rc).decay_at = std::move(out);
      }};
  r[prefix + ".momentum"] = {
      [step](const RunConfig& rc) { return fmt_f64(step(const_cast<RunConfig&>(rc)).momentum); },
      [step](RunConfig& rc, const std::string& k, const std::string& v) {
        step(rc).momentum = to_f64(k, v);
      }};
  r[prefix + ".weight_decay"] = {
      [step](const RunConfig& rc) {
        return fmt_f64(step(const_cast<RunConfig&>(rc)).weight_decay);
      },
      [step](RunConfig& rc, const std::string& k, const std::string& v) {
        step(rc).weight_decay = to_f64(k, v);
      }};
}

Registry build_registry() {
  Registry r;

  reg_convs(r, "model.backbone.stage1", REF(rc.model.backbone.stage1));
  reg_ints(r, "model.backbone.stage2", REF(rc.model.backbone.stage2));

  reg_str(r, "model.rpn.variant", REF(rc.model.rpn_variant));
  reg_int(r, "model.rpn.branch_channels", REF(rc.model.rpn.branch_channels));
  reg_bool(r, "model.rpn.use_mult", REF(rc.model.rpn.use_mult));
  reg_bool(r, "model.rpn.use_sub", REF(rc.model.rpn.use_sub));
  reg_bool(r, "model.rpn.use_cat", REF(rc.model.rpn.use_cat));
  reg_bool(r, "model.rpn.mult_literal_sub", REF(rc.model.rpn.mult_literal_sub));
  reg_f64s(r, "model.rpn.anchor.scales", REF(rc.model.rpn.anchors.scales));
  reg_f64s(r, "model.rpn.anchor.ratios", REF(rc.model.rpn.anchors.ratios));
  reg_int(r, "model.rpn.anchor.stride", REF(rc.model.rpn.anchors.stride));
  reg_int(r, "model.rpn.pre_nms_k", REF(rc.model.rpn.pre_nms_k));
  reg_f64(r, "model.rpn.nms_iou", REF(rc.model.rpn.nms_iou));
  reg_int(r, "model.rpn.post_nms_k", REF(rc.model.rpn.post_nms_k));
  reg_f64(r, "model.rpn.delta_clamp", REF(rc.model.rpn.delta_clamp));

  reg_int(r, "model.cls.roi_size", REF(rc.model.cls.roi_size));
  reg_int(r, "model.cls.roi_samples", REF(rc.model.cls.roi_samples));
  reg_bool(r, "model.cls.use_alignment", REF(rc.model.cls.use_alignment));
  reg_bool(r, "model.cls.use_fg_attention", REF(rc.model.cls.use_fg_attention));
  reg_bool(r, "model.cls.cosine_affinity", REF(rc.model.cls.cosine_affinity));
  reg_bool(r, "model.cls.use_mult", REF(rc.model.cls.use_mult));
  reg_bool(r, "model.cls.use_sub", REF(rc.model.cls.use_sub));
  reg_bool(r, "model.cls.use_cat", REF(rc.model.cls.use_cat));
  reg_int(r, "model.cls.psi_layers", REF(rc.model.cls.psi_layers));
  reg_f64(r, "model.cls.score_threshold", REF(rc.model.cls.score_threshold));
  reg_f64(r, "model.cls.nms_iou", REF(rc.model.cls.nms_iou));
  reg_int(r, "model.cls.max_detections", REF(rc.model.cls.max_detections));
  reg_f64(r, "model.cls.delta_clamp", REF(rc.model.cls.delta_clamp));

  reg_f64s(r, "model.base.anchor.scales", REF(rc.model.base.anchors.scales));
  reg_f64s(r, "model.base.anchor.ratios", REF(rc.model.base.anchors.ratios));
  reg_int(r, "model.base.anchor.stride", REF(rc.model.base.anchors.stride));
  reg_int(r, "model.base.pre_nms_k", REF(rc.model.base.pre_nms_k));
  reg_f64(r, "model.base.rpn_nms_iou", REF(rc.model.base.rpn_nms_iou));
  reg_int(r, "model.base.post_nms_k", REF(rc.model.base.post_nms_k));
  reg_f64(r, "model.base.delta_clamp", REF(rc.model.base.delta_clamp));
  reg_int(r, "model.base.roi_size", REF(rc.model.base.roi_size));
  reg_int(r, "model.base.roi_samples", REF(rc.model.base.roi_samples));
  reg_f64(r, "model.base.score_threshold", REF(rc.model.base.score_threshold));
  reg_f64(r, "model.base.nms_iou", REF(rc.model.base.nms_iou));
  reg_int(r, "model.base.max_detections", REF(rc.model.base.max_detections));

  reg_f64(r, "model.support_context", REF(rc.model.support_context));
  reg_int(r, "model.support_size", REF(rc.model.support_size));

  reg_int(r, "train.n_way", REF(rc.train.n_way));
  reg_int(r, "train.k_shot", REF(rc.train.k_shot));
  reg_int(r, "train.n_queries", REF(rc.train.n_queries));
  reg_int(r, "train.neg_per_pos", REF(rc.train.neg_per_pos));
  reg_int(r, "train.pos_cap", REF(rc.train.pos_cap));
  reg_int(r, "train.neg_floor", REF(rc.train.neg_floor));
  reg_f64(r, "train.rpn_pos_iou", REF(rc.train.rpn_pos_iou));
  reg_f64(r, "train.rpn_neg_iou", REF(rc.train.rpn_neg_iou));
  reg_f64(r, "train.cls_pos_iou", REF(rc.train.cls_pos_iou));
  reg_f64(r, "train.cls_neg_iou", REF(rc.train.cls_neg_iou));
  reg_bool(r, "train.add_gt_proposals", REF(rc.train.add_gt_proposals));
  reg_bool(r, "train.finetune_base_head", REF(rc.train.finetune_base_head));
  reg_f64(r, "train.beta", REF(rc.train.beta));
  reg_u64(r, "train.seed", REF(rc.train.seed));
  reg_schedule(r, "train.step1", [](RunConfig& rc) -> StepSchedule& { return rc.train.step1; });
  reg_schedule(r, "train.step2", [](RunConfig& rc) -> StepSchedule& { return rc.train.step2; });
  reg_schedule(r, "train.step3", [](RunConfig& rc) -> StepSchedule& { return rc.train.step3; });

  reg_int(r, "synth.n_base", REF(rc.synth.n_base));
  reg_int(r, "synth.n_novel", REF(rc.synth.n_novel));
  reg_int(r, "synth.train_images", REF(rc.synth.train_images));
  reg_int(r, "synth.test_images", REF(rc.synth.test_images));
  reg_int(r, "synth.support_images_per_novel", REF(rc.synth.support_images_per_novel));
  reg_ints(r, "synth.shot_list", REF(rc.synth.shot_list));
  reg_int(r, "synth.image_size", REF(rc.synth.image_size));
  reg_int(r, "synth.min_objects", REF(rc.synth.min_objects));
  reg_int(r, "synth.max_objects", REF(rc.synth.max_objects));
  reg_int(r, "synth.min_side", REF(rc.synth.min_side));
  reg_int(r, "synth.max_side", REF(rc.synth.max_side));
  reg_f64(r, "synth.max_pair_iou", REF(rc.synth.max_pair_iou));
  reg_u64(r, "synth.seed", REF(rc.synth.seed));

  reg_ints(r, "eval.shots", REF(rc.eval_shots));
  reg_ints(r, "eval.budgets", REF(rc.eval_budgets));
  reg_int(r, "eval.proposals_per_class", REF(rc.proposals_per_class));
  reg_int(r, "eval.workers", REF(rc.workers));

  reg_str(r, "paths.data", REF(rc.data_dir));
  reg_str(r, "paths.out", REF(rc.out_dir));

  return r;
}

#undef REF

const Registry& registry() {
  static const Registry r = build_registry();
  return r;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Strip comments: leading '#', or '#' preceded by whitespace.
    std::string code = line;
    for (size_t i = 0; i < code.size(); ++i)
      if (code[i] == '#' && (i == 0 || code[i - 1] == ' ' || code[i - 1] == '\t')) {
        code.resize(i);
        break;
      }
    code = trim(code);
    if (code.empty()) continue;
    size_t eq = code.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + trim(line) + "'");
    std::string key = trim(code.substr(0, eq));
    std::string value = trim(code.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

void set_config_key(RunConfig& rc, const std::string& key, const std::string& value) {
  auto it = registry().find(key);
  if (it == registry().end()) bad(key, "unknown key");
  it->second.set(rc, key, value);
}

void apply_config_file(RunConfig& rc, const std::string& path) {
  for (const auto& [key, value] : parse_config_text(read_text_file(path)))
    set_config_key(rc, key, value);
}

std::string config_to_text(const RunConfig& rc) {
  std::string out;
  for (const auto& [key, entry] : registry()) out += key + " = " + entry.get(rc) + "\n";
  return out;
}

void validate_config(const RunConfig& rc) {
  const int stride = rc.model.backbone.total_stride();
  if (rc.model.backbone.stage1.empty()) bad("model.backbone.stage1", "must not be empty");
  for (const ConvSpec& c : rc.model.backbone.stage1)
    if (c.channels < 1 || c.stride < 1)
      bad("model.backbone.stage1", "channels and stride must be positive");
  for (int c : rc.model.backbone.stage2)
    if (c < 1) bad("model.backbone.stage2", "channels must be positive");

  if (rc.model.rpn_variant != "meta" && rc.model.rpn_variant != "attention-baseline")
    bad("model.rpn.variant", "must be 'meta' or 'attention-baseline'");
  if (rc.model.rpn.anchors.stride != stride)
    bad("model.rpn.anchor.stride", "must equal the backbone stride (" + std::to_string(stride) +
                                       ")");
  if (rc.model.base.anchors.stride != stride)
    bad("model.base.anchor.stride", "must equal the backbone stride (" + std::to_string(stride) +
                                        ")");
  if (rc.model.rpn.anchors.scales.empty() || rc.model.rpn.anchors.ratios.empty())
    bad("model.rpn.anchor.scales", "scales and ratios must not be empty");
  if (rc.model.base.anchors.scales.empty() || rc.model.base.anchors.ratios.empty())
    bad("model.base.anchor.scales", "scales and ratios must not be empty");
  if (rc.model.support_size < stride || rc.model.support_size % stride != 0)
    bad("model.support_size", "must be a positive multiple of the backbone stride (" +
                                  std::to_string(stride) + ")");
  if (rc.model.support_context < 1.0) bad("model.support_context", "must be >= 1");

  auto positive = [](const std::string& key, int v) {
    if (v < 1) bad(key, "must be positive");
  };
  positive("model.rpn.pre_nms_k", rc.model.rpn.pre_nms_k);
  positive("model.cls.roi_size", rc.model.cls.roi_size);
  positive("model.cls.roi_samples", rc.model.cls.roi_samples);
  positive("model.cls.psi_layers", rc.model.cls.psi_layers);
  positive("model.cls.max_detections", rc.model.cls.max_detections);
  positive("model.base.roi_size", rc.model.base.roi_size);
  positive("model.base.roi_samples", rc.model.base.roi_samples);
  positive("train.n_way", rc.train.n_way);
  positive("train.k_shot", rc.train.k_shot);
  positive("train.n_queries", rc.train.n_queries);
  positive("train.neg_per_pos", rc.train.neg_per_pos);
  positive("train.pos_cap", rc.train.pos_cap);
  positive("train.step1.iterations", rc.train.step1.iterations);
  positive("train.step2.iterations", rc.train.step2.iterations);
  positive("train.step3.iterations", rc.train.step3.iterations);
  positive("eval.proposals_per_class", rc.proposals_per_class);
  positive("eval.workers", rc.workers);
  if (rc.train.neg_floor < 0) bad("train.neg_floor", "must be non-negative");
  if (rc.model.rpn.post_nms_k < 0) bad("model.rpn.post_nms_k", "must be non-negative");
  if (rc.model.base.post_nms_k < 0) bad("model.base.post_nms_k", "must be non-negative");
  if (rc.eval_budgets.empty()) bad("eval.budgets", "must not be empty");
  for (int k : rc.eval_budgets) positive("eval.budgets", k);
  if (rc.eval_shots.empty()) bad("eval.shots", "must not be empty");
  for (int k : rc.eval_shots) positive("eval.shots", k);

  auto unit_open = [](const std::string& key, double v) {
    if (!(v > 0.0 && v < 1.0)) bad(key, "must lie in (0, 1)");
  };
  unit_open("model.rpn.nms_iou", rc.model.rpn.nms_iou);
  unit_open("model.cls.nms_iou", rc.model.cls.nms_iou);
  unit_open("model.base.rpn_nms_iou", rc.model.base.rpn_nms_iou);
  unit_open("model.base.nms_iou", rc.model.base.nms_iou);
  if (rc.model.cls.score_threshold < 0 || rc.model.cls.score_threshold >= 1)
    bad("model.cls.score_threshold", "must lie in [0, 1)");
  if (rc.model.base.score_threshold < 0 || rc.model.base.score_threshold >= 1)
    bad("model.base.score_threshold", "must lie in [0, 1)");
  if (rc.train.rpn_neg_iou > rc.train.rpn_pos_iou)
    bad("train.rpn_neg_iou", "must not exceed train.rpn_pos_iou");
  if (rc.train.cls_neg_iou > rc.train.cls_pos_iou)
    bad("train.cls_neg_iou", "must not exceed train.cls_pos_iou");

  if (rc.synth.n_base < 4) bad("synth.n_base", "must be at least 4");
  if (rc.synth.n_novel < 2) bad("synth.n_novel", "must be at least 2");
  if (rc.synth.min_objects < 1 || rc.synth.max_objects < rc.synth.min_objects)
    bad("synth.max_objects", "need 1 <= min_objects <= max_objects");
  if (rc.synth.min_side < 4 || rc.synth.max_side < rc.synth.min_side)
    bad("synth.max_side", "need 4 <= min_side <= max_side");
  if (rc.synth.max_side >= rc.synth.image_size)
    bad("synth.max_side", "must be smaller than synth.image_size");
  if (rc.synth.shot_list.empty()) bad("synth.shot_list", "must not be empty");
  for (int k : rc.synth.shot_list) positive("synth.shot_list", k);
}

}  // namespace metadet
