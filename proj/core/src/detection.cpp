#include "metadet/detection.hpp"

#include <algorithm>
#include <map>

namespace metadet {

std::vector<Detection> finalize_detections(std::vector<Detection> dets, double score_threshold,
                                           double nms_iou, int max_total) {
  std::map<int, std::vector<int>> by_class;  // class id -> input positions
  for (int i = 0; i < int(dets.size()); ++i)
    if (dets[size_t(i)].score >= score_threshold) by_class[dets[size_t(i)].class_id].push_back(i);

  std::vector<int> kept;
  for (const auto& [cls, idx] : by_class) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i : idx) {
      boxes.push_back(dets[size_t(i)].box);
      scores.push_back(dets[size_t(i)].score);
    }
    for (int k : nms(boxes, scores, nms_iou)) kept.push_back(idx[size_t(k)]);
  }

  std::sort(kept.begin(), kept.end(), [&](int a, int b) {
    const Detection &da = dets[size_t(a)], &db = dets[size_t(b)];
    if (da.score != db.score) return da.score > db.score;
    if (da.class_id != db.class_id) return da.class_id < db.class_id;
    return a < b;
  });
  if (int(kept.size()) > max_total) kept.resize(size_t(max_total));

  std::vector<Detection> out;
  out.reserve(kept.size());
  for (int i : kept) out.push_back(dets[size_t(i)]);
  return out;
}

}  // namespace metadet
