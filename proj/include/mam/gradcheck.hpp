#pragma once

#include <functional>

#include "mam/tensor.hpp"

namespace mam {

// Central finite difference d f / d x[i] at step h. f must be a pure function
// of the tensor's current contents.
inline double finite_difference_gradient(const std::function<double()>& f, double& x,
                                         double h = 1e-5) {
  const double keep = x;
  x = keep + h;
  const double fp = f();
  x = keep - h;
  const double fm = f();
  x = keep;
  return (fp - fm) / (2.0 * h);
}

// Relative error with a floor that absorbs finite-difference roundoff on
// near-zero gradients; an incorrect adjoint still shows up at O(1).
inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheckResult {
  int checked = 0;
  double max_rel_err = 0;
  bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

// Checks every element of one tensor against the analytic gradient `g`.
inline GradCheckResult check_gradient(const std::function<double()>& f, Tensor& x,
                                      const Tensor& g, double h = 1e-5) {
  GradCheckResult r;
  check(g.numel() == x.numel(), "check_gradient: gradient shape");
  for (long long i = 0; i < x.numel(); ++i) {
    const double fd = finite_difference_gradient(f, x[i], h);
    r.max_rel_err = std::max(r.max_rel_err, grad_rel_err(g[i], fd));
    ++r.checked;
  }
  return r;
}

}  // namespace mam
