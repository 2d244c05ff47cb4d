#include "cvm/gradcheck.hpp"

namespace cvm {

GradCheckReport compare_gradients(const std::vector<double>& analytic,
                                  const std::vector<double>& numeric,
                                  const GradCheckOptions& opts) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("analytic and numeric gradients differ in length");
  }
  GradCheckReport report;
  report.checked = analytic.size();
  double scale = opts.scale_floor;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    scale = std::max({scale, std::abs(analytic[k]), std::abs(numeric[k])});
  }
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const double abs_err = std::abs(analytic[k] - numeric[k]);
    if (abs_err > report.max_abs_error || !std::isfinite(abs_err)) {
      report.max_abs_error = abs_err;
      report.worst_index = k;
    }
  }
  report.max_rel_error = report.max_abs_error / scale;
  report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error <= opts.tolerance;
  return report;
}

}  // namespace cvm
