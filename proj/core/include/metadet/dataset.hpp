#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "metadet/geometry.hpp"
#include "metadet/image.hpp"

namespace metadet {

struct Category {
  int id = 0;
  std::string name;
};

struct Annotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  Box box;  // pixel corners, inclusive of the object extent
};

struct ImageRec {
  int id = 0;
  std::string file_name;  // relative to the dataset root
  int width = 0;
  int height = 0;
  std::string split;  // "train" | "test" | "support"
};

// Few-shot protocol: which categories are base vs novel, and for each shot
// count k the exact annotation ids enrolled as that class's support set.
// supports[k][class_id] is a k-element list; smaller shot sets are prefixes
// of larger ones so runs at different k share their common supports.
struct FewshotSplit {
  std::vector<int> base_ids;
  std::vector<int> novel_ids;
  std::map<int, std::map<int, std::vector<int>>> supports;
};

class Dataset {
 public:
  std::string root;
  std::vector<Category> categories;
  std::vector<ImageRec> images;
  std::vector<Annotation> annotations;
  FewshotSplit fewshot;

  void build_indexes();

  const Category& category(int id) const;
  const ImageRec& image(int id) const;
  const Annotation& annotation(int id) const;
  const std::vector<int>& annotations_of_image(int image_id) const;
  std::vector<int> images_in_split(const std::string& split) const;
  ImageU8 load_image(int image_id) const;

 private:
  std::map<int, size_t> cat_index_;
  std::map<int, size_t> img_index_;
  std::map<int, size_t> ann_index_;
  std::map<int, std::vector<int>> anns_by_image_;
  static const std::vector<int> kNoAnns;
};

// Reads <root>/manifest.json and cross-validates every reference: ids unique,
// annotations point at real images/categories, boxes well-formed and inside
// their image, base/novel disjoint and covering all categories, support lists
// sized to their shot count with smaller shots prefixing larger ones, and
// every image file present on disk.
Dataset load_dataset(const std::string& root);

void save_manifest(const Dataset& ds, const std::string& path);

}  // namespace metadet
