#pragma once

#include <functional>
#include <map>
#include <string>

#include "metadet/tensor.hpp"

namespace metadet {

using DParamMap = std::map<std::string, DTensor>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t coords_checked = 0;

  bool ok(double tol = 1e-4) const { return max_rel_error < tol; }
};

// Central-difference check of analytic gradients, always at 64-bit: the
// comparison needs ~1e-10 headroom that float cannot provide.
//
// value_fn must be a pure function of the parameter map (fixed inputs, fixed
// sampling decisions). Relative error uses max(|analytic|, |numeric|, 1e-3)
// as the scale so near-zero coordinates do not divide by noise.
GradCheckReport finite_diff_check(const DParamMap& params,
                                  const std::function<double(const DParamMap&)>& value_fn,
                                  const DParamMap& analytic_grads,
                                  double eps = 1e-5);

}  // namespace metadet
