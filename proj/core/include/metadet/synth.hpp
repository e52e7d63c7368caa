#pragma once

#include <string>
#include <vector>

#include "metadet/dataset.hpp"

namespace metadet {

struct SynthConfig {
  int n_base = 10;  // 4..10
  int n_novel = 5;  // 2..5
  int train_images = 800;
  int test_images = 200;
  int support_images_per_novel = 12;  // must cover the largest shot count
  std::vector<int> shot_list = {1, 2, 3, 5, 10};
  int image_size = 96;
  int min_objects = 1;
  int max_objects = 3;
  int min_side = 22;  // longer box side, pixels
  int max_side = 52;
  double max_pair_iou = 0.3;
  uint64_t seed = 1;
};

// Renders the benchmark into out_dir (images/NNNNNN.png + manifest.json) and
// returns the loaded dataset. Fully deterministic in (config, seed): the same
// call produces bit-identical files.
//
// Class design: each class is a distinct (shape, hue) pair. Base classes use
// hues 10..190 degrees; novel classes sit in a disjoint 220..320 band, so a
// detector trained only on base colors has no trivial color shortcut onto
// novel objects. Odd class ids add a stripe texture. Backgrounds are
// low-frequency correlated noise, not flat fills.
//
// Splits: "train" holds only base-class objects; "test" mixes all classes;
// "support" holds one novel object per image for enrollment. The fewshot
// block lists, per shot count and class, the exact support annotation ids
// (novel from the support split, base from train), smaller shots prefixing
// larger ones.
Dataset generate_dataset(const SynthConfig& cfg, const std::string& out_dir);

// Shape vocabulary in class-id order (base then novel), for reports.
std::vector<std::string> synth_class_names(int n_base, int n_novel);

}  // namespace metadet
