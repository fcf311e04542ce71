#pragma once

#include <catch2/catch_amalgamated.hpp>
#include <functional>
#include <vector>

#include "mam/gradcheck.hpp"
#include "mam/params.hpp"
#include "mam/tape.hpp"

namespace mamtest {

using namespace mam;

// Finite-difference check of a tape program against its backward pass.
// Every tensor in xs is treated as a parameter; the builder must construct a
// scalar loss from the given leaf refs (order matches xs).
inline void fd_check(std::vector<Tensor>& xs,
                     const std::function<Ref(Tape&, std::vector<Ref>&)>& build,
                     double tol = 2e-6, double h = 1e-5) {
  auto eval = [&]() {
    Tape t;
    std::vector<Ref> rs;
    rs.reserve(xs.size());
    for (auto& x : xs) rs.push_back(t.leaf(x, static_cast<int>(rs.size())));
    return t.val(build(t, rs))[0];
  };
  Tape t;
  std::vector<Ref> rs;
  for (auto& x : xs) rs.push_back(t.leaf(x, static_cast<int>(rs.size())));
  Ref loss = build(t, rs);
  t.backward(loss);
  for (size_t i = 0; i < xs.size(); ++i) {
    const Tensor g = t.param_grads().at(static_cast<int>(i));
    GradCheckResult r = check_gradient(eval, xs[i], g, h);
    INFO("input " << i << " max rel err " << r.max_rel_err);
    REQUIRE(r.ok(tol));
  }
}

// Samples coordinates of a parameter struct and compares tape gradients of
// the builder's scalar loss against central differences on the same tape
// program. Returns the max relative error over the sampled coordinates.
template <class P>
double fd_check_params(P& params, const std::function<Ref(Tape&, Binder&)>& build, int n_samples,
                       Rng& rng, double h = 1e-5) {
  ParamIndex ix = index_params(params);
  Tape t;
  Binder bind(t, ix.pid_of);
  Ref loss = build(t, bind);
  t.backward(loss);
  auto eval = [&]() {
    Tape t2;
    Binder b2(t2, ix.pid_of);
    return t2.val(build(t2, b2))[0];
  };
  double max_rel = 0;
  for (int s = 0; s < n_samples; ++s) {
    const int pid = rng.randint(static_cast<int>(ix.tensors.size()));
    Tensor& pt = *ix.tensors[pid];
    if (pt.numel() == 0) continue;
    const long long k = rng.randint(static_cast<int>(pt.numel()));
    const double fd = finite_difference_gradient(eval, pt[k], h);
    auto it = t.param_grads().find(pid);
    const double ad = it == t.param_grads().end() ? 0.0 : it->second[k];
    max_rel = std::max(max_rel, grad_rel_err(ad, fd));
  }
  return max_rel;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0;
  for (long long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mamtest
