#pragma once

#include <vector>

#include "metadet/geometry.hpp"

namespace metadet {

struct Detection {
  int class_id = -1;
  double score = 0;
  Box box;
};

// Score threshold, then greedy NMS within each class, then a global cap.
// Results come back sorted by descending score; ties break toward the lower
// class id, then the earlier input position, so the output is a pure
// function of the input order.
std::vector<Detection> finalize_detections(std::vector<Detection> dets, double score_threshold,
                                           double nms_iou, int max_total);

}  // namespace metadet
