#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cotrack/matrix.hpp"
#include "cotrack/params.hpp"
#include "cotrack/rng.hpp"

namespace cotrack {

/// Central finite difference of a scalar function w.r.t. one double slot.
inline double central_difference(double* slot, double eps,
                                 const std::function<double()>& f) {
  const double orig = *slot;
  *slot = orig + eps;
  const double fp = f();
  *slot = orig - eps;
  const double fm = f();
  *slot = orig;
  return (fp - fm) / (2.0 * eps);
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  int entries_checked = 0;
  std::string worst_param;

  bool passes(double tol) const { return max_rel_err < tol; }
};

/// Compares the analytic gradients already accumulated in `ps` against
/// central finite differences of `loss`. For each tensor, up to
/// `samples_per_tensor` entries are checked (all of them when the tensor is
/// small). `mutate_scale` perturbs the analytic value before comparison and
/// exists so the checker itself can be shown to catch an injected bug.
inline GradCheckReport check_param_gradients(
    ParamStore& ps, const std::function<double()>& loss, double eps = 1e-5,
    int samples_per_tensor = 8, uint64_t sample_seed = 17,
    const std::string& mutate_param = "", double mutate_scale = 1.0) {
  GradCheckReport rep;
  Rng rng(sample_seed);
  for (Param& p : ps.all()) {
    const int n = static_cast<int>(p.value.size());
    if (n == 0) continue;
    std::vector<int> idx;
    if (n <= samples_per_tensor) {
      for (int i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (int s = 0; s < samples_per_tensor; ++s)
        idx.push_back(rng.uniform_int(0, n - 1));
    }
    for (int i : idx) {
      const double fd = central_difference(&p.value.data[i], eps, loss);
      double an = p.grad.data[i];
      if (p.name == mutate_param) an *= mutate_scale;
      const double e = rel_err(an, fd);
      ++rep.entries_checked;
      if (e > rep.max_rel_err) {
        rep.max_rel_err = e;
        rep.worst_param = p.name;
      }
    }
  }
  return rep;
}

/// Same comparison for the gradient w.r.t. an input matrix.
inline GradCheckReport check_input_gradient(
    Matrix& input, const Matrix& analytic,
    const std::function<double()>& loss, double eps = 1e-5) {
  GradCheckReport rep;
  rep.worst_param = "<input>";
  for (size_t i = 0; i < input.data.size(); ++i) {
    const double fd = central_difference(&input.data[i], eps, loss);
    const double e = rel_err(analytic.data[i], fd);
    ++rep.entries_checked;
    rep.max_rel_err = std::max(rep.max_rel_err, e);
  }
  return rep;
}

}  // namespace cotrack
