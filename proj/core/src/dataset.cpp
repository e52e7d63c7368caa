#include "metadet/dataset.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "metadet/util.hpp"

namespace metadet {

using nlohmann::json;

const std::vector<int> Dataset::kNoAnns;

void Dataset::build_indexes() {
  cat_index_.clear();
  img_index_.clear();
  ann_index_.clear();
  anns_by_image_.clear();
  for (size_t i = 0; i < categories.size(); ++i) {
    if (!cat_index_.emplace(categories[i].id, i).second)
      throw std::runtime_error("dataset: duplicate category id " + std::to_string(categories[i].id));
  }
  for (size_t i = 0; i < images.size(); ++i) {
    if (!img_index_.emplace(images[i].id, i).second)
      throw std::runtime_error("dataset: duplicate image id " + std::to_string(images[i].id));
  }
  for (size_t i = 0; i < annotations.size(); ++i) {
    if (!ann_index_.emplace(annotations[i].id, i).second)
      throw std::runtime_error("dataset: duplicate annotation id " + std::to_string(annotations[i].id));
    anns_by_image_[annotations[i].image_id].push_back(annotations[i].id);
  }
}

const Category& Dataset::category(int id) const {
  auto it = cat_index_.find(id);
  if (it == cat_index_.end())
    throw std::runtime_error("dataset: unknown category id " + std::to_string(id));
  return categories[it->second];
}

const ImageRec& Dataset::image(int id) const {
  auto it = img_index_.find(id);
  if (it == img_index_.end())
    throw std::runtime_error("dataset: unknown image id " + std::to_string(id));
  return images[it->second];
}

const Annotation& Dataset::annotation(int id) const {
  auto it = ann_index_.find(id);
  if (it == ann_index_.end())
    throw std::runtime_error("dataset: unknown annotation id " + std::to_string(id));
  return annotations[it->second];
}

const std::vector<int>& Dataset::annotations_of_image(int image_id) const {
  auto it = anns_by_image_.find(image_id);
  return it == anns_by_image_.end() ? kNoAnns : it->second;
}

std::vector<int> Dataset::images_in_split(const std::string& split) const {
  std::vector<int> out;
  for (const auto& im : images)
    if (im.split == split) out.push_back(im.id);
  return out;
}

ImageU8 Dataset::load_image(int image_id) const {
  return read_png(path_join(root, image(image_id).file_name));
}

namespace {

json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4)
    throw std::runtime_error("dataset: bbox must be [x1,y1,x2,y2]");
  return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

void validate(const Dataset& ds) {
  const std::set<std::string> splits = {"train", "test", "support"};
  for (const auto& im : ds.images) {
    if (im.width <= 0 || im.height <= 0)
      throw std::runtime_error("dataset: image " + std::to_string(im.id) + " has non-positive size");
    if (!splits.count(im.split))
      throw std::runtime_error("dataset: image " + std::to_string(im.id) + " has unknown split '" +
                               im.split + "'");
    if (!file_exists(path_join(ds.root, im.file_name)))
      throw std::runtime_error("dataset: missing image file " + im.file_name);
  }
  for (const auto& an : ds.annotations) {
    const ImageRec& im = ds.image(an.image_id);  // throws on dangling ref
    ds.category(an.category_id);
    if (!(an.box.x1 < an.box.x2) || !(an.box.y1 < an.box.y2))
      throw std::runtime_error("dataset: annotation " + std::to_string(an.id) + " has empty box");
    if (an.box.x1 < 0 || an.box.y1 < 0 || an.box.x2 > double(im.width) ||
        an.box.y2 > double(im.height))
      throw std::runtime_error("dataset: annotation " + std::to_string(an.id) +
                               " box leaves the image");
  }

  std::set<int> base(ds.fewshot.base_ids.begin(), ds.fewshot.base_ids.end());
  std::set<int> novel(ds.fewshot.novel_ids.begin(), ds.fewshot.novel_ids.end());
  if (base.size() != ds.fewshot.base_ids.size() || novel.size() != ds.fewshot.novel_ids.size())
    throw std::runtime_error("dataset: repeated id in base/novel lists");
  for (int id : base)
    if (novel.count(id))
      throw std::runtime_error("dataset: category " + std::to_string(id) + " is both base and novel");
  if (base.size() + novel.size() != ds.categories.size())
    throw std::runtime_error("dataset: base+novel must cover every category exactly once");
  for (int id : base) ds.category(id);
  for (int id : novel) ds.category(id);

  for (const auto& [k, per_class] : ds.fewshot.supports) {
    if (k <= 0) throw std::runtime_error("dataset: non-positive shot count");
    for (const auto& [cid, ann_ids] : per_class) {
      ds.category(cid);
      if (int(ann_ids.size()) != k)
        throw std::runtime_error("dataset: class " + std::to_string(cid) + " has " +
                                 std::to_string(ann_ids.size()) + " supports for k=" +
                                 std::to_string(k));
      std::set<int> uniq(ann_ids.begin(), ann_ids.end());
      if (int(uniq.size()) != k)
        throw std::runtime_error("dataset: repeated support annotation for class " +
                                 std::to_string(cid));
      for (int aid : ann_ids) {
        const Annotation& an = ds.annotation(aid);
        if (an.category_id != cid)
          throw std::runtime_error("dataset: support annotation " + std::to_string(aid) +
                                   " belongs to class " + std::to_string(an.category_id) +
                                   ", listed under " + std::to_string(cid));
      }
    }
  }
  // Prefix property: the k-shot list for a class starts with the k'-shot list
  // for every smaller k', so enrolling at a higher k only adds supports.
  for (auto it = ds.fewshot.supports.begin(); it != ds.fewshot.supports.end(); ++it) {
    auto jt = std::next(it);
    if (jt == ds.fewshot.supports.end()) break;
    for (const auto& [cid, small] : it->second) {
      auto ct = jt->second.find(cid);
      if (ct == jt->second.end())
        throw std::runtime_error("dataset: class " + std::to_string(cid) + " present at k=" +
                                 std::to_string(it->first) + " but not k=" +
                                 std::to_string(jt->first));
      if (!std::equal(small.begin(), small.end(), ct->second.begin()))
        throw std::runtime_error("dataset: supports for class " + std::to_string(cid) +
                                 " at k=" + std::to_string(it->first) +
                                 " are not a prefix of k=" + std::to_string(jt->first));
    }
  }
}

}  // namespace

Dataset load_dataset(const std::string& root) {
  const std::string manifest = path_join(root, "manifest.json");
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("dataset: cannot open " + manifest);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset: bad JSON in " + manifest + ": " + e.what());
  }

  Dataset ds;
  ds.root = root;
  for (const auto& c : j.at("categories"))
    ds.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  for (const auto& im : j.at("images"))
    ds.images.push_back({im.at("id").get<int>(), im.at("file_name").get<std::string>(),
                         im.at("width").get<int>(), im.at("height").get<int>(),
                         im.at("split").get<std::string>()});
  for (const auto& an : j.at("annotations"))
    ds.annotations.push_back({an.at("id").get<int>(), an.at("image_id").get<int>(),
                              an.at("category_id").get<int>(), box_from_json(an.at("bbox"))});

  const auto& fs = j.at("fewshot");
  ds.fewshot.base_ids = fs.at("base_category_ids").get<std::vector<int>>();
  ds.fewshot.novel_ids = fs.at("novel_category_ids").get<std::vector<int>>();
  for (const auto& [k_str, per_class] : fs.at("supports").items()) {
    int k = std::stoi(k_str);
    for (const auto& [cid_str, ann_ids] : per_class.items())
      ds.fewshot.supports[k][std::stoi(cid_str)] = ann_ids.get<std::vector<int>>();
  }

  ds.build_indexes();
  validate(ds);
  return ds;
}

void save_manifest(const Dataset& ds, const std::string& path) {
  json j;
  j["categories"] = json::array();
  for (const auto& c : ds.categories) j["categories"].push_back({{"id", c.id}, {"name", c.name}});
  j["images"] = json::array();
  for (const auto& im : ds.images)
    j["images"].push_back({{"id", im.id},
                           {"file_name", im.file_name},
                           {"width", im.width},
                           {"height", im.height},
                           {"split", im.split}});
  j["annotations"] = json::array();
  for (const auto& an : ds.annotations)
    j["annotations"].push_back({{"id", an.id},
                                {"image_id", an.image_id},
                                {"category_id", an.category_id},
                                {"bbox", box_to_json(an.box)}});
  json supports = json::object();
  for (const auto& [k, per_class] : ds.fewshot.supports) {
    json row = json::object();
    for (const auto& [cid, ann_ids] : per_class) row[std::to_string(cid)] = ann_ids;
    supports[std::to_string(k)] = row;
  }
  j["fewshot"] = {{"base_category_ids", ds.fewshot.base_ids},
                  {"novel_category_ids", ds.fewshot.novel_ids},
                  {"supports", supports}};

  std::ofstream out(path);
  if (!out) throw std::runtime_error("dataset: cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace metadet
