#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "metadet/dataset.hpp"
#include "metadet/util.hpp"

namespace metadet {

// One training episode: a handful of classes, k support annotations per
// class, and query images carrying objects of those classes. Query ground
// truth is restricted to allowed_anns when non-empty (the balanced
// fine-tuning sets cap each class at k instances, so other objects in the
// same images must not leak in).
struct Episode {
  std::vector<int> class_ids;
  std::map<int, std::vector<int>> support_anns;  // class -> k annotation ids
  std::vector<int> query_images;
  std::vector<int> allowed_anns;  // empty = any annotation of an episode class
};

// Samples n_way base classes from the train split, k_shot support objects
// per class, and up to n_queries query images that contain an episode-class
// object and share no image with any chosen support (support and query
// objects are disjoint by construction). Deterministic given the rng state.
// Throws when fewer than n_way classes have k_shot + 1 annotated objects or
// when no query image remains.
Episode sample_episode(const Dataset& ds, int n_way, int k_shot, int n_queries, Rng& rng);

// Balanced fine-tuning episode over the shot-k support lists of both base
// and novel classes: every class's support set is its full k-instance
// allotment, queries are drawn from the images holding those instances, and
// ground truth is restricted to the balanced annotations themselves.
Episode sample_finetune_episode(const Dataset& ds, int n_way, int k, int n_queries, Rng& rng);

// The annotations an episode's query image contributes for a given class.
std::vector<int> episode_query_anns(const Dataset& ds, const Episode& ep, int image_id,
                                    int class_id);

// Balanced training subset of match labels (match_anchors convention:
// >= 0 positive, kNegative background, kIgnore skipped). Keeps every
// positive up to pos_cap, then min(neg_per_pos * kept, available) negatives;
// with no positives, a fixed floor of negatives keeps the step informative.
// Indices come back ascending.
struct PairSample {
  std::vector<int64_t> pos;
  std::vector<int64_t> neg;
};
PairSample sample_pairs(const std::vector<int>& labels, int neg_per_pos, int pos_cap,
                        int neg_floor, Rng& rng);

}  // namespace metadet
