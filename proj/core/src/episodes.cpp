#include "metadet/episodes.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace metadet {

namespace {

// class id -> its annotation ids within the given split, ascending.
std::map<int, std::vector<int>> anns_by_class(const Dataset& ds, const std::string& split) {
  std::set<int> split_images;
  for (int id : ds.images_in_split(split)) split_images.insert(id);
  std::map<int, std::vector<int>> out;
  for (const Annotation& a : ds.annotations)
    if (split_images.count(a.image_id)) out[a.category_id].push_back(a.id);
  for (auto& [cls, ids] : out) std::sort(ids.begin(), ids.end());
  return out;
}

std::vector<int> pick(const std::vector<int>& pool, int k, Rng& rng) {
  std::vector<int> out;
  out.reserve(size_t(k));
  for (int i : rng.sample_without_replacement(int(pool.size()), k))
    out.push_back(pool[size_t(i)]);
  std::sort(out.begin(), out.end());
  return out;
}

Episode assemble_queries(const Dataset& ds, Episode ep, int n_queries, Rng& rng) {
  std::set<int> support_images;
  for (const auto& [cls, anns] : ep.support_anns)
    for (int a : anns) support_images.insert(ds.annotation(a).image_id);

  std::set<int> allowed(ep.allowed_anns.begin(), ep.allowed_anns.end());
  std::set<int> episode_classes(ep.class_ids.begin(), ep.class_ids.end());
  std::set<int> pool_set;
  for (const Annotation& a : ds.annotations) {
    if (!episode_classes.count(a.category_id)) continue;
    if (!allowed.empty() && !allowed.count(a.id)) continue;
    if (support_images.count(a.image_id)) continue;
    if (allowed.empty() && ds.image(a.image_id).split != "train") continue;
    pool_set.insert(a.image_id);
  }
  std::vector<int> pool(pool_set.begin(), pool_set.end());
  if (pool.empty()) throw std::runtime_error("sample_episode: no query image available");
  ep.query_images = pick(pool, std::min(n_queries, int(pool.size())), rng);
  return ep;
}

}  // namespace

Episode sample_episode(const Dataset& ds, int n_way, int k_shot, int n_queries, Rng& rng) {
  if (n_way < 1 || k_shot < 1 || n_queries < 1)
    throw std::invalid_argument("sample_episode: counts must be positive");
  std::map<int, std::vector<int>> by_class = anns_by_class(ds, "train");

  std::vector<int> eligible;
  for (int cls : ds.fewshot.base_ids) {
    auto it = by_class.find(cls);
    if (it != by_class.end() && int(it->second.size()) >= k_shot + 1) eligible.push_back(cls);
  }
  std::sort(eligible.begin(), eligible.end());
  if (int(eligible.size()) < n_way)
    throw std::runtime_error("sample_episode: not enough classes with k_shot + 1 objects");

  Episode ep;
  for (int i : rng.sample_without_replacement(int(eligible.size()), n_way))
    ep.class_ids.push_back(eligible[size_t(i)]);
  std::sort(ep.class_ids.begin(), ep.class_ids.end());
  for (int cls : ep.class_ids) ep.support_anns[cls] = pick(by_class[cls], k_shot, rng);
  return assemble_queries(ds, std::move(ep), n_queries, rng);
}

Episode sample_finetune_episode(const Dataset& ds, int n_way, int k, int n_queries, Rng& rng) {
  auto shot = ds.fewshot.supports.find(k);
  if (shot == ds.fewshot.supports.end())
    throw std::runtime_error("sample_finetune_episode: no support list for this shot count");

  std::vector<int> classes;
  for (const auto& [cls, anns] : shot->second) classes.push_back(cls);
  std::sort(classes.begin(), classes.end());
  if (int(classes.size()) < n_way)
    throw std::runtime_error("sample_finetune_episode: not enough classes in the balanced set");

  Episode ep;
  for (int i : rng.sample_without_replacement(int(classes.size()), n_way))
    ep.class_ids.push_back(classes[size_t(i)]);
  std::sort(ep.class_ids.begin(), ep.class_ids.end());
  for (int cls : ep.class_ids) {
    ep.support_anns[cls] = shot->second.at(cls);
    for (int a : ep.support_anns[cls]) ep.allowed_anns.push_back(a);
  }
  std::sort(ep.allowed_anns.begin(), ep.allowed_anns.end());

  // The balanced set is the only data here, so queries revisit the support
  // images themselves; disjointness is a meta-training-only guarantee.
  std::set<int> pool_set;
  for (int a : ep.allowed_anns) pool_set.insert(ds.annotation(a).image_id);
  std::vector<int> pool(pool_set.begin(), pool_set.end());
  ep.query_images = pick(pool, std::min(n_queries, int(pool.size())), rng);
  return ep;
}

std::vector<int> episode_query_anns(const Dataset& ds, const Episode& ep, int image_id,
                                    int class_id) {
  std::set<int> allowed(ep.allowed_anns.begin(), ep.allowed_anns.end());
  std::vector<int> out;
  for (int a : ds.annotations_of_image(image_id)) {
    const Annotation& ann = ds.annotation(a);
    if (ann.category_id != class_id) continue;
    if (!allowed.empty() && !allowed.count(a)) continue;
    out.push_back(a);
  }
  return out;
}

PairSample sample_pairs(const std::vector<int>& labels, int neg_per_pos, int pos_cap,
                        int neg_floor, Rng& rng) {
  if (neg_per_pos < 1) throw std::invalid_argument("sample_pairs: ratio must be >= 1");
  std::vector<int64_t> pos, neg;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) pos.push_back(int64_t(i));
    else if (labels[i] == kNegative) neg.push_back(int64_t(i));
  }

  PairSample out;
  if (int(pos.size()) > pos_cap) {
    for (int i : rng.sample_without_replacement(int(pos.size()), pos_cap))
      out.pos.push_back(pos[size_t(i)]);
    std::sort(out.pos.begin(), out.pos.end());
  } else {
    out.pos = std::move(pos);
  }

  int want = out.pos.empty() ? neg_floor : neg_per_pos * int(out.pos.size());
  want = std::min(want, int(neg.size()));
  if (want == int(neg.size())) {
    out.neg = std::move(neg);
  } else {
    for (int i : rng.sample_without_replacement(int(neg.size()), want))
      out.neg.push_back(neg[size_t(i)]);
    std::sort(out.neg.begin(), out.neg.end());
  }
  return out;
}

}  // namespace metadet
