#include "metadet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "metadet/util.hpp"

namespace metadet {

namespace {

// Local shape coordinates: u,v in [-1,1] spanning the box, v growing downward.
// Every predicate touches all four box edges so the annotation box is tight.
enum class Shape {
  kCircle,
  kSquare,
  kTriangleUp,
  kRing,
  kCross,
  kDiamond,
  kAstroid,
  kHBar,
  kPentagon,
  kHexagon,
  kTriangleDown,
  kEllipseWide,
  kLShape,
  kXShape,
  kDome,
};

struct ClassSpec {
  Shape shape;
  const char* name;
  double hue;          // degrees
  double aspect_lo;    // box height / width range
  double aspect_hi;
  bool striped;        // texture flag: stripe color modulation
};

// 10 base + 5 novel. Hues: base 10..190, novel 220..320 (disjoint bands).
const ClassSpec kBaseSpecs[] = {
    {Shape::kCircle, "circle", 10, 0.8, 1.25, false},
    {Shape::kSquare, "square", 30, 0.8, 1.25, true},
    {Shape::kTriangleUp, "triangle_up", 50, 0.8, 1.25, false},
    {Shape::kRing, "ring", 70, 0.8, 1.25, true},
    {Shape::kCross, "cross", 90, 0.8, 1.25, false},
    {Shape::kDiamond, "diamond", 110, 0.8, 1.25, true},
    {Shape::kAstroid, "astroid", 130, 0.8, 1.25, false},
    {Shape::kHBar, "hbar", 150, 0.35, 0.45, true},
    {Shape::kPentagon, "pentagon", 170, 0.8, 1.25, false},
    {Shape::kHexagon, "hexagon", 190, 0.8, 1.25, true},
};
const ClassSpec kNovelSpecs[] = {
    {Shape::kTriangleDown, "triangle_down", 220, 0.8, 1.25, false},
    {Shape::kEllipseWide, "ellipse_wide", 245, 0.45, 0.55, true},
    {Shape::kLShape, "l_shape", 270, 0.8, 1.25, false},
    {Shape::kXShape, "x_shape", 295, 0.8, 1.25, true},
    {Shape::kDome, "dome", 320, 0.45, 0.55, false},
};

bool point_in_convex(const double* xs, const double* ys, int n, double u, double v) {
  // Vertices in consistent winding; inside when every edge cross product
  // keeps the same sign (boundary counts as inside).
  double sign = 0;
  for (int i = 0; i < n; ++i) {
    int j = (i + 1) % n;
    double cr = (xs[j] - xs[i]) * (v - ys[i]) - (ys[j] - ys[i]) * (u - xs[i]);
    if (cr != 0) {
      if (sign == 0)
        sign = cr > 0 ? 1 : -1;
      else if ((cr > 0 ? 1 : -1) != sign)
        return false;
    }
  }
  return true;
}

bool shape_inside(Shape s, double u, double v) {
  switch (s) {
    case Shape::kCircle:
    case Shape::kEllipseWide:  // same fill; the box aspect makes it an ellipse
      return u * u + v * v <= 1.0;
    case Shape::kSquare:
    case Shape::kHBar:  // square fill; the wide box makes it a bar
      return true;
    case Shape::kTriangleUp:  // apex at the top edge (v = -1)
      return std::abs(u) <= 0.5 * (v + 1.0);
    case Shape::kTriangleDown:  // apex at the bottom edge (v = +1)
      return std::abs(u) <= 0.5 * (1.0 - v);
    case Shape::kRing: {
      double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case Shape::kCross:
      return std::abs(u) <= 0.35 || std::abs(v) <= 0.35;
    case Shape::kDiamond:
      return std::abs(u) + std::abs(v) <= 1.0;
    case Shape::kAstroid:
      return std::sqrt(std::abs(u)) + std::sqrt(std::abs(v)) <= 1.0;
    case Shape::kPentagon: {
      // Regular pentagon, apex up, rescaled per axis to fill the box.
      static const int n = 5;
      static double xs[n], ys[n];
      static const bool init = [] {
        double rx[n], ry[n];
        for (int i = 0; i < n; ++i) {
          double a = -M_PI / 2 + 2.0 * M_PI * i / n;  // apex at top (v = -1)
          rx[i] = std::cos(a);
          ry[i] = std::sin(a);
        }
        double xmax = 0, ymin = 1, ymax = -1;
        for (int i = 0; i < n; ++i) {
          xmax = std::max(xmax, std::abs(rx[i]));
          ymin = std::min(ymin, ry[i]);
          ymax = std::max(ymax, ry[i]);
        }
        for (int i = 0; i < n; ++i) {
          xs[i] = rx[i] / xmax;
          ys[i] = 2.0 * (ry[i] - ymin) / (ymax - ymin) - 1.0;
        }
        return true;
      }();
      (void)init;
      return point_in_convex(xs, ys, n, u, v);
    }
    case Shape::kHexagon:  // flat-top hexagon filling the box
      return std::abs(u) <= 1.0 && std::abs(v) <= 1.0 && std::abs(u) + std::abs(v) * 0.5 <= 1.0;
    case Shape::kLShape:
      return u <= -0.33 || v >= 0.33;
    case Shape::kXShape:
      return std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35;
    case Shape::kDome: {
      // Semicircular cap: full width at the bottom edge, apex at the top.
      double s = 0.5 * (v + 1.0);  // 0 at top, 1 at bottom
      return u * u + (1.0 - s) * (1.0 - s) <= 1.0;
    }
  }
  return false;
}

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h_deg, double s, double v) {
  double h = h_deg - 360.0 * std::floor(h_deg / 360.0);
  double c = v * s;
  double hp = h / 60.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  double m = v - c;
  return {r + m, g + m, b + m};
}

uint8_t to_u8(double x) {
  int v = int(std::lround(x * 255.0));
  return uint8_t(std::clamp(v, 0, 255));
}

// Low-frequency correlated noise: a coarse RGB control grid bilinearly
// upsampled over the image, plus fine per-pixel jitter. Muted range so
// objects (bright, saturated) stay separable but the background is not flat.
void fill_background(ImageU8& img, Rng& rng) {
  constexpr int kGrid = 6;
  double grid[kGrid][kGrid][3];
  for (int gy = 0; gy < kGrid; ++gy)
    for (int gx = 0; gx < kGrid; ++gx)
      for (int c = 0; c < 3; ++c) grid[gy][gx][c] = rng.uniform(0.20, 0.55);
  for (int y = 0; y < img.height; ++y) {
    double fy = double(y) / img.height * (kGrid - 1);
    int y0 = std::min(int(fy), kGrid - 2);
    double ty = fy - y0;
    for (int x = 0; x < img.width; ++x) {
      double fx = double(x) / img.width * (kGrid - 1);
      int x0 = std::min(int(fx), kGrid - 2);
      double tx = fx - x0;
      uint8_t* px = img.px(x, y);
      for (int c = 0; c < 3; ++c) {
        double v00 = grid[y0][x0][c], v01 = grid[y0][x0 + 1][c];
        double v10 = grid[y0 + 1][x0][c], v11 = grid[y0 + 1][x0 + 1][c];
        double v = (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
        v += rng.uniform(-0.03, 0.03);
        px[c] = to_u8(v);
      }
    }
  }
}

struct PlacedObject {
  int class_index;  // into the combined spec table
  int x1, y1, w, h;  // integer pixel box
  double hue, sat, val;

  Box box() const { return Box{double(x1), double(y1), double(x1 + w), double(y1 + h)}; }
};

void render_object(ImageU8& img, const PlacedObject& obj, const ClassSpec& spec) {
  Rgb base_col = hsv_to_rgb(obj.hue, obj.sat, obj.val);
  Rgb dark_col = hsv_to_rgb(obj.hue, obj.sat, obj.val * 0.55);
  for (int py = obj.y1; py < obj.y1 + obj.h; ++py) {
    for (int px = obj.x1; px < obj.x1 + obj.w; ++px) {
      // 3x3 supersampled coverage for soft edges.
      int hits = 0;
      double su = 0, sv = 0;
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          double ix = px + (sx + 0.5) / 3.0;
          double iy = py + (sy + 0.5) / 3.0;
          double u = 2.0 * (ix - obj.x1) / obj.w - 1.0;
          double v = 2.0 * (iy - obj.y1) / obj.h - 1.0;
          if (shape_inside(spec.shape, u, v)) {
            ++hits;
            su += u;
            sv += v;
          }
        }
      if (hits == 0) continue;
      double cov = hits / 9.0;
      double u = su / hits, v = sv / hits;
      // Stripes modulate color only (never coverage), so the box stays tight.
      bool dark = spec.striped &&
                  (int(std::floor((u + v) * 2.5 + 100.0)) % 2 == 0);
      const Rgb& col = dark ? dark_col : base_col;
      uint8_t* p = img.px(px, py);
      p[0] = to_u8(col.r * cov + p[0] / 255.0 * (1 - cov));
      p[1] = to_u8(col.g * cov + p[1] / 255.0 * (1 - cov));
      p[2] = to_u8(col.b * cov + p[2] / 255.0 * (1 - cov));
    }
  }
}

std::string image_file_name(int image_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "images/%06d.png", image_id);
  return buf;
}

// Places n objects of the given classes with bounded rejection sampling.
std::vector<PlacedObject> place_objects(const SynthConfig& cfg,
                                        const std::vector<ClassSpec>& specs,
                                        const std::vector<int>& class_indices, Rng& rng) {
  constexpr int kImageRetries = 25;
  constexpr int kPlaceRetries = 60;
  const int margin = 1;
  for (int attempt = 0; attempt < kImageRetries; ++attempt) {
    std::vector<PlacedObject> placed;
    bool ok = true;
    for (int ci : class_indices) {
      const ClassSpec& spec = specs[size_t(ci)];
      bool found = false;
      for (int t = 0; t < kPlaceRetries && !found; ++t) {
        int side = int(rng.uniform_int(cfg.min_side, cfg.max_side));
        double aspect = rng.uniform(spec.aspect_lo, spec.aspect_hi);
        int w, h;
        if (aspect <= 1.0) {
          w = side;
          h = std::max(8, int(std::lround(side * aspect)));
        } else {
          h = side;
          w = std::max(8, int(std::lround(side / aspect)));
        }
        if (w + 2 * margin > cfg.image_size || h + 2 * margin > cfg.image_size) continue;
        PlacedObject obj;
        obj.class_index = ci;
        obj.w = w;
        obj.h = h;
        obj.x1 = int(rng.uniform_int(margin, cfg.image_size - margin - w));
        obj.y1 = int(rng.uniform_int(margin, cfg.image_size - margin - h));
        obj.hue = spec.hue + rng.uniform(-6.0, 6.0);
        obj.sat = rng.uniform(0.70, 0.95);
        obj.val = rng.uniform(0.75, 1.0);
        bool clash = false;
        for (const auto& other : placed)
          if (iou(obj.box(), other.box()) > cfg.max_pair_iou) {
            clash = true;
            break;
          }
        if (!clash) {
          placed.push_back(obj);
          found = true;
        }
      }
      if (!found) {
        ok = false;
        break;
      }
    }
    if (ok) return placed;
  }
  throw std::runtime_error("synth: could not place objects after bounded retries");
}

}  // namespace

std::vector<std::string> synth_class_names(int n_base, int n_novel) {
  std::vector<std::string> names;
  for (int i = 0; i < n_base; ++i) names.push_back(kBaseSpecs[i].name);
  for (int i = 0; i < n_novel; ++i) names.push_back(kNovelSpecs[i].name);
  return names;
}

Dataset generate_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  if (cfg.n_base < 4 || cfg.n_base > 10) throw std::invalid_argument("synth: n_base must be 4..10");
  if (cfg.n_novel < 2 || cfg.n_novel > 5)
    throw std::invalid_argument("synth: n_novel must be 2..5");
  if (cfg.shot_list.empty()) throw std::invalid_argument("synth: empty shot list");
  int max_shot = *std::max_element(cfg.shot_list.begin(), cfg.shot_list.end());
  if (cfg.support_images_per_novel < max_shot)
    throw std::invalid_argument("synth: support_images_per_novel below the largest shot count");
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
    throw std::invalid_argument("synth: bad objects_per_image range");
  if (cfg.min_side < 8 || cfg.max_side < cfg.min_side || cfg.max_side + 2 > cfg.image_size)
    throw std::invalid_argument("synth: bad box side range");

  std::vector<ClassSpec> specs;  // combined table; index = category id - 1
  for (int i = 0; i < cfg.n_base; ++i) specs.push_back(kBaseSpecs[i]);
  for (int i = 0; i < cfg.n_novel; ++i) specs.push_back(kNovelSpecs[i]);

  ensure_dir(path_join(out_dir, "images"));

  Dataset ds;
  ds.root = out_dir;
  for (int i = 0; i < int(specs.size()); ++i)
    ds.categories.push_back({i + 1, specs[size_t(i)].name});
  for (int i = 0; i < cfg.n_base; ++i) ds.fewshot.base_ids.push_back(i + 1);
  for (int i = 0; i < cfg.n_novel; ++i) ds.fewshot.novel_ids.push_back(cfg.n_base + i + 1);

  Rng master(cfg.seed);
  int next_image_id = 1;
  int next_ann_id = 1;

  auto emit_image = [&](const std::string& split, const std::vector<int>& class_indices,
                        Rng rng) {
    ImageU8 img(cfg.image_size, cfg.image_size);
    fill_background(img, rng);
    std::vector<PlacedObject> placed = place_objects(cfg, specs, class_indices, rng);
    for (const auto& obj : placed) render_object(img, obj, specs[size_t(obj.class_index)]);

    int image_id = next_image_id++;
    std::string file_name = image_file_name(image_id);
    write_png(path_join(out_dir, file_name), img);
    ds.images.push_back({image_id, file_name, cfg.image_size, cfg.image_size, split});
    for (const auto& obj : placed)
      ds.annotations.push_back({next_ann_id++, image_id, obj.class_index + 1, obj.box()});
  };

  // Train: base classes only. Sub-stream per image keeps the layout of image
  // i independent of how many draws earlier images consumed.
  Rng train_rng = master.fork(1);
  for (int i = 0; i < cfg.train_images; ++i) {
    Rng rng = train_rng.fork(uint64_t(i));
    int n = int(rng.uniform_int(cfg.min_objects, cfg.max_objects));
    std::vector<int> cls;
    for (int j = 0; j < n; ++j) cls.push_back(int(rng.uniform_int(0, cfg.n_base - 1)));
    emit_image("train", cls, rng);
  }

  // Test: all classes mixed.
  Rng test_rng = master.fork(2);
  int n_total = cfg.n_base + cfg.n_novel;
  for (int i = 0; i < cfg.test_images; ++i) {
    Rng rng = test_rng.fork(uint64_t(i));
    int n = int(rng.uniform_int(cfg.min_objects, cfg.max_objects));
    std::vector<int> cls;
    for (int j = 0; j < n; ++j) cls.push_back(int(rng.uniform_int(0, n_total - 1)));
    emit_image("test", cls, rng);
  }

  // Support: one clean novel object per image, fixed count per class.
  Rng sup_rng = master.fork(3);
  std::map<int, std::vector<int>> support_anns_by_class;  // class id -> ann ids in gen order
  for (int c = 0; c < cfg.n_novel; ++c) {
    for (int i = 0; i < cfg.support_images_per_novel; ++i) {
      Rng rng = sup_rng.fork(uint64_t(c) * 1000 + i);
      int first_ann = next_ann_id;
      emit_image("support", {cfg.n_base + c}, rng);
      support_anns_by_class[cfg.n_base + c + 1].push_back(first_ann);
    }
  }

  // Base-class support pools come from train annotations, shuffled once per
  // class; every shot count takes a prefix, so supports nest across k.
  std::map<int, std::vector<int>> base_anns_by_class;
  for (const auto& an : ds.annotations)
    if (an.category_id <= cfg.n_base) base_anns_by_class[an.category_id].push_back(an.id);
  Rng pick_rng = master.fork(4);
  for (auto& [cid, pool] : base_anns_by_class) {
    Rng r = pick_rng.fork(uint64_t(cid));
    r.shuffle(pool);
  }

  std::vector<int> shots = cfg.shot_list;
  std::sort(shots.begin(), shots.end());
  for (int k : shots) {
    auto& per_class = ds.fewshot.supports[k];
    for (const auto& [cid, pool] : base_anns_by_class) {
      if (int(pool.size()) < k)
        throw std::runtime_error("synth: class " + std::to_string(cid) +
                                 " has too few train annotations for k=" + std::to_string(k));
      per_class[cid] = std::vector<int>(pool.begin(), pool.begin() + k);
    }
    for (const auto& [cid, pool] : support_anns_by_class)
      per_class[cid] = std::vector<int>(pool.begin(), pool.begin() + k);
  }

  ds.build_indexes();
  save_manifest(ds, path_join(out_dir, "manifest.json"));
  return load_dataset(out_dir);
}

}  // namespace metadet
