#include "metadet/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace metadet {

GradCheckReport finite_diff_check(const DParamMap& params,
                                  const std::function<double(const DParamMap&)>& value_fn,
                                  const DParamMap& analytic_grads,
                                  double eps) {
  if (eps <= 0) throw std::invalid_argument("finite_diff_check: eps must be positive");
  GradCheckReport rep;
  DParamMap work = params;
  for (const auto& [name, p] : params) {
    auto git = analytic_grads.find(name);
    if (git == analytic_grads.end())
      throw std::invalid_argument("finite_diff_check: missing analytic gradient for " + name);
    if (!git->second.same_shape(p))
      throw std::invalid_argument("finite_diff_check: gradient shape mismatch for " + name);
    DTensor& wp = work.at(name);
    for (int64_t i = 0; i < p.size(); ++i) {
      const double orig = wp[i];
      wp[i] = orig + eps;
      const double fp = value_fn(work);
      wp[i] = orig - eps;
      const double fm = value_fn(work);
      wp[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff_check: non-finite forward value at " + name);
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = git->second[i];
      const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      const double rel = std::abs(analytic - numeric) / scale;
      ++rep.coords_checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = name;
        rep.worst_index = i;
        rep.analytic = analytic;
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace metadet
