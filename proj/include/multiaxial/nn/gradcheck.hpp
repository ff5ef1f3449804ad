#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace multiaxial::nn {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t compared = 0;
  std::size_t skipped = 0;
};

/// Compares an analytic gradient of the scalar function `f` at `x` with
/// central differences of step `step`. The error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8); coordinates for which `skip(i)` holds
/// (non-differentiable points) are left out.
inline GradCheckResult finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                               std::span<const double> x, std::span<const double> analytic,
                                               double step, const std::function<bool(std::size_t)>& skip = {}) {
  GradCheckResult r;
  std::vector<double> probe(x.begin(), x.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    if (skip && skip(i)) {
      ++r.skipped;
      continue;
    }
    const double x0 = probe[i];
    probe[i] = x0 + step;
    const double fp = f(probe);
    probe[i] = x0 - step;
    const double fm = f(probe);
    probe[i] = x0;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
    ++r.compared;
  }
  return r;
}

}  // namespace multiaxial::nn
