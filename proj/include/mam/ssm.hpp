#pragma once

#include "mam/tensor.hpp"

namespace mam {

// Discretization of the diagonal state equation h' = A h + B x over one step
// of length delta. Zoh is exact for piecewise-constant input; Euler keeps
// A_bar exact and takes B_bar = delta * B.
enum class Discretization : uint8_t { Zoh, Euler };

inline Discretization discretization_from_name(const std::string& name) {
  if (name == "zoh") return Discretization::Zoh;
  if (name == "euler") return Discretization::Euler;
  throw std::invalid_argument("discretization: unknown variant '" + name + "'");
}

// phi1(z) = (exp(z) - 1) / z, the factor in the exact B_bar. Series expansion
// below |z| = 1e-4 keeps the z -> 0 limit finite.
inline double phi1(double z) {
  if (std::abs(z) < 1e-4) return 1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0));
  return std::expm1(z) / z;
}

// phi1'(z) = (exp(z)(z - 1) + 1) / z^2
inline double phi1_grad(double z) {
  if (std::abs(z) < 1e-4) return 0.5 + z * (1.0 / 3.0 + z / 8.0);
  return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}

// A: [E,N] diagonal state matrix entries per channel, delta: [E] step sizes,
// b: [N] input map. Outputs are [E,N].
template <class T>
void discretize_zoh(const TensorT<T>& a, const TensorT<T>& delta, const TensorT<T>& b,
                    TensorT<T>& a_bar, TensorT<T>& b_bar) {
  check(a.ndim() == 2, "discretize_zoh: A must be [E,N]");
  const int e_dim = a.shape[0], n_dim = a.shape[1];
  check(delta.numel() == e_dim, "discretize_zoh: delta length vs channel dim");
  check(b.numel() == n_dim, "discretize_zoh: B length vs state dim");
  a_bar = TensorT<T>({e_dim, n_dim});
  b_bar = TensorT<T>({e_dim, n_dim});
  for (int e = 0; e < e_dim; ++e) {
    const double d = static_cast<double>(delta[e]);
    for (int n = 0; n < n_dim; ++n) {
      const double z = d * static_cast<double>(a.at(e, n));
      a_bar.at(e, n) = static_cast<T>(std::exp(z));
      b_bar.at(e, n) = static_cast<T>(d * phi1(z) * static_cast<double>(b[n]));
    }
  }
}

template <class T>
void discretize_euler_b(const TensorT<T>& a, const TensorT<T>& delta, const TensorT<T>& b,
                        TensorT<T>& a_bar, TensorT<T>& b_bar) {
  check(a.ndim() == 2, "discretize_euler_b: A must be [E,N]");
  const int e_dim = a.shape[0], n_dim = a.shape[1];
  check(delta.numel() == e_dim, "discretize_euler_b: delta length vs channel dim");
  check(b.numel() == n_dim, "discretize_euler_b: B length vs state dim");
  a_bar = TensorT<T>({e_dim, n_dim});
  b_bar = TensorT<T>({e_dim, n_dim});
  for (int e = 0; e < e_dim; ++e) {
    const double d = static_cast<double>(delta[e]);
    for (int n = 0; n < n_dim; ++n) {
      a_bar.at(e, n) = static_cast<T>(std::exp(d * static_cast<double>(a.at(e, n))));
      b_bar.at(e, n) = static_cast<T>(d * static_cast<double>(b[n]));
    }
  }
}

// Input-dependent SSM parameters. a_log stores log(-A) entrywise, so the
// state matrix is always strictly negative. w_c consumes the scan input for
// the self variant and the source sequence for the cross variant.
template <class T>
struct SelectiveSsmParamsT {
  TensorT<T> a_log;    // [E,N]
  TensorT<T> d_skip;   // [E]
  TensorT<T> w_b;      // [E,N]
  TensorT<T> w_c;      // [E,N] or [D_src,N]
  TensorT<T> w_dt_down;  // [E,r]
  TensorT<T> w_dt_up;    // [r,E]
  TensorT<T> dt_bias;    // [E]
};
using SelectiveSsmParams = SelectiveSsmParamsT<double>;

template <class T>
TensorT<T> neg_exp(const TensorT<T>& a_log) {
  TensorT<T> a(a_log.shape);
  for (long long i = 0; i < a.numel(); ++i)
    a[i] = static_cast<T>(-std::exp(static_cast<double>(a_log[i])));
  return a;
}

// B_t = W_B^T u_t and C_t = W_C^T src_t per token: [L,*] -> [L,N].
template <class T>
TensorT<T> selective_b(const TensorT<T>& u, const SelectiveSsmParamsT<T>& p) {
  return matmul(u, p.w_b);
}
template <class T>
TensorT<T> selective_c(const TensorT<T>& src, const SelectiveSsmParamsT<T>& p) {
  check(src.shape[1] == p.w_c.shape[0], "selective_c: source token dim vs W_C rows");
  return matmul(src, p.w_c);
}

// delta_t = softplus(W_up (W_down u_t) + bias): [L,E] -> [L,E], positive.
template <class T>
TensorT<T> selective_delta(const TensorT<T>& u, const SelectiveSsmParamsT<T>& p) {
  TensorT<T> pre = linear(matmul(u, p.w_dt_down), p.w_dt_up, p.dt_bias);
  return pointwise(Act::Softplus, pre);
}

// Per-step discrete scan inputs for a whole sequence, struct-of-arrays:
//   a_bar   [L,E,N]  state decay
//   b_bar_x [L,E,N]  discrete input contribution B_bar_t * x_t
//   c       [L,N]    output map
struct ScanStep;  // single-step view, used by the combiner tests

template <class T>
struct ScanStepsT {
  TensorT<T> a_bar;
  TensorT<T> b_bar_x;
  TensorT<T> c;
  int len() const { return a_bar.ndim() == 3 ? a_bar.shape[0] : 0; }
};
using ScanSteps = ScanStepsT<double>;

// Expands selective parameters + input into per-step scan quantities.
// b_bar_x[t,e,n] already folds in the input: B_bar[t,e,n] * u[t,e].
template <class T>
ScanStepsT<T> build_scan_steps(const TensorT<T>& u, const TensorT<T>& delta,
                               const TensorT<T>& b_seq, const TensorT<T>& c_seq,
                               const TensorT<T>& a, Discretization disc) {
  const int n_tok = u.shape[0], e_dim = u.shape[1], n_dim = a.shape[1];
  check(delta.shape[0] == n_tok && delta.shape[1] == e_dim, "build_scan_steps: delta shape");
  check(b_seq.shape[0] == n_tok && b_seq.shape[1] == n_dim, "build_scan_steps: B shape");
  check(c_seq.shape[0] == n_tok && c_seq.shape[1] == n_dim, "build_scan_steps: C shape");
  check(a.shape[0] == e_dim, "build_scan_steps: A channel dim");
  ScanStepsT<T> s;
  s.a_bar = TensorT<T>({n_tok, e_dim, n_dim});
  s.b_bar_x = TensorT<T>({n_tok, e_dim, n_dim});
  s.c = c_seq;
  for (int t = 0; t < n_tok; ++t)
    for (int e = 0; e < e_dim; ++e) {
      const double d = static_cast<double>(delta.at(t, e));
      const double uv = static_cast<double>(u.at(t, e));
      for (int n = 0; n < n_dim; ++n) {
        const double z = d * static_cast<double>(a.at(e, n));
        const double bb = disc == Discretization::Zoh ? d * phi1(z) : d;
        s.a_bar.at3(t, e, n) = static_cast<T>(std::exp(z));
        s.b_bar_x.at3(t, e, n) =
            static_cast<T>(bb * static_cast<double>(b_seq.at(t, n)) * uv);
      }
    }
  return s;
}

// h_t = a_bar_t h_{t-1} + b_bar_x_t with h_0 = 0; y_t = C_t h_t + d_skip x_t.
// Pass an empty d_skip to omit the skip term. h_out, if non-null, receives
// the full state trajectory [L,E,N].
template <class T>
TensorT<T> scan_sequential(const ScanStepsT<T>& s, const TensorT<T>& x,
                           const TensorT<T>& d_skip, TensorT<T>* h_out = nullptr) {
  const int n_tok = s.a_bar.shape[0], e_dim = s.a_bar.shape[1], n_dim = s.a_bar.shape[2];
  check(x.shape[0] == n_tok && x.shape[1] == e_dim, "scan_sequential: x shape vs steps");
  TensorT<T> y({n_tok, e_dim});
  std::vector<T> h(static_cast<size_t>(e_dim) * n_dim, T(0));
  if (h_out) *h_out = TensorT<T>({n_tok, e_dim, n_dim});
  for (int t = 0; t < n_tok; ++t) {
    for (int e = 0; e < e_dim; ++e) {
      T* he = h.data() + static_cast<size_t>(e) * n_dim;
      const T* ab = &s.a_bar.at3(t, e, 0);
      const T* bx = &s.b_bar_x.at3(t, e, 0);
      const T* ct = &s.c.at(t, 0);
      T acc = 0;
      for (int n = 0; n < n_dim; ++n) {
        he[n] = ab[n] * he[n] + bx[n];
        acc += ct[n] * he[n];
      }
      y.at(t, e) = acc;
      if (h_out) std::copy(he, he + n_dim, &h_out->at3(t, e, 0));
    }
    if (d_skip.numel() > 0)
      for (int e = 0; e < e_dim; ++e) y.at(t, e) += d_skip[e] * x.at(t, e);
  }
  return y;
}

// Affine scan element (a, b) representing h -> a h + b. Composition of
// "first s1 then s2" is (a2 a1, a2 b1 + b2); it is associative, which is what
// permits the balanced-tree evaluation below.
struct ScanStep {
  double a;
  double b;
};
inline ScanStep combine(const ScanStep& later, const ScanStep& earlier) {
  return {later.a * earlier.a, later.a * earlier.b + later.b};
}

namespace detail {

// In-place inclusive scan over the time axis of interleaved (a,b) lanes.
// Balanced halves; single threaded but the combine order is the tree order,
// so results are independent of any sequential-accumulation order.
template <class T>
void tree_scan(T* a, T* b, int n_tok, long long lanes) {
  if (n_tok <= 1) return;
  const int mid = n_tok / 2;
  tree_scan(a, b, mid, lanes);
  tree_scan(a + static_cast<long long>(mid) * lanes, b + static_cast<long long>(mid) * lanes,
            n_tok - mid, lanes);
  const T* atot = a + static_cast<long long>(mid - 1) * lanes;
  const T* btot = b + static_cast<long long>(mid - 1) * lanes;
  for (int t = mid; t < n_tok; ++t) {
    T* at = a + static_cast<long long>(t) * lanes;
    T* bt = b + static_cast<long long>(t) * lanes;
    for (long long l = 0; l < lanes; ++l) {
      bt[l] = at[l] * btot[l] + bt[l];
      at[l] = at[l] * atot[l];
    }
  }
}

}  // namespace detail

// Same contract as scan_sequential, evaluated as an associative prefix
// composition over (a_bar, b_bar_x) pairs. h_t is the b-component of the
// inclusive prefix product applied to h_0 = 0.
template <class T>
TensorT<T> scan_parallel(const ScanStepsT<T>& s, const TensorT<T>& x,
                         const TensorT<T>& d_skip) {
  const int n_tok = s.a_bar.shape[0], e_dim = s.a_bar.shape[1], n_dim = s.a_bar.shape[2];
  check(x.shape[0] == n_tok && x.shape[1] == e_dim, "scan_parallel: x shape vs steps");
  TensorT<T> a = s.a_bar;
  TensorT<T> b = s.b_bar_x;
  detail::tree_scan(a.data.data(), b.data.data(), n_tok,
                    static_cast<long long>(e_dim) * n_dim);
  TensorT<T> y({n_tok, e_dim});
  for (int t = 0; t < n_tok; ++t)
    for (int e = 0; e < e_dim; ++e) {
      const T* hb = &b.at3(t, e, 0);
      const T* ct = &s.c.at(t, 0);
      T acc = 0;
      for (int n = 0; n < n_dim; ++n) acc += ct[n] * hb[n];
      y.at(t, e) = acc;
      if (d_skip.numel() > 0) y.at(t, e) += d_skip[e] * x.at(t, e);
    }
  return y;
}

// Materialized lower-triangular attention equivalent of the scan, one L x L
// matrix per channel: lam[e,i,j] = C_i (prod_{k=j+1..i} a_bar_k) b_bar_j,
// with the empty product (i == j) equal to one. b_bar here excludes x.
template <class T>
TensorT<T> implicit_attention_matrix(const ScanStepsT<T>& s, const TensorT<T>& b_bar) {
  const int n_tok = s.a_bar.shape[0], e_dim = s.a_bar.shape[1], n_dim = s.a_bar.shape[2];
  check(b_bar.same_shape(s.a_bar), "implicit_attention_matrix: b_bar shape");
  TensorT<T> lam({e_dim, n_tok, n_tok});
  std::vector<T> prod(n_dim);
  for (int e = 0; e < e_dim; ++e)
    for (int j = 0; j < n_tok; ++j) {
      std::fill(prod.begin(), prod.end(), T(1));
      for (int i = j; i < n_tok; ++i) {
        if (i > j)
          for (int n = 0; n < n_dim; ++n) prod[n] *= s.a_bar.at3(i, e, n);
        T acc = 0;
        for (int n = 0; n < n_dim; ++n) acc += s.c.at(i, n) * prod[n] * b_bar.at3(j, e, n);
        lam.at3(e, i, j) = acc;
      }
    }
  return lam;
}

// y_i = sum_{j<=i} lam[e,i,j] x_j + d_skip x_i; strictly upper entries are
// never read, matching the causal contract.
template <class T>
TensorT<T> apply_attention_matrix(const TensorT<T>& lam, const TensorT<T>& x,
                                  const TensorT<T>& d_skip) {
  const int e_dim = lam.shape[0], n_tok = lam.shape[1];
  check(x.shape[0] == n_tok && x.shape[1] == e_dim, "apply_attention_matrix: x shape");
  TensorT<T> y({n_tok, e_dim});
  for (int e = 0; e < e_dim; ++e)
    for (int i = 0; i < n_tok; ++i) {
      T acc = 0;
      for (int j = 0; j <= i; ++j) acc += lam.at3(e, i, j) * x.at(j, e);
      if (d_skip.numel() > 0) acc += d_skip[e] * x.at(i, e);
      y.at(i, e) = acc;
    }
  return y;
}

// ---------------------------------------------------------------------------
// Fused selective scan: forward + exact reverse pass used by the tape.
// Recomputes a_bar and the discretization factor from (delta, A) during the
// backward sweep; only the state trajectory h is kept from the forward.
// ---------------------------------------------------------------------------
struct ScanGrads {
  Tensor du, ddelta, db, dc, da, dd;
};

inline Tensor selective_scan_forward(const Tensor& u, const Tensor& delta, const Tensor& b_seq,
                                     const Tensor& c_seq, const Tensor& a, const Tensor& d_skip,
                                     Discretization disc, Tensor& h_saved) {
  ScanSteps s = build_scan_steps(u, delta, b_seq, c_seq, a, disc);
  return scan_sequential(s, u, d_skip, &h_saved);
}

inline ScanGrads selective_scan_backward(const Tensor& go, const Tensor& u, const Tensor& delta,
                                         const Tensor& b_seq, const Tensor& c_seq, const Tensor& a,
                                         const Tensor& d_skip, Discretization disc,
                                         const Tensor& h_saved) {
  const int n_tok = u.shape[0], e_dim = u.shape[1], n_dim = a.shape[1];
  ScanGrads g;
  g.du = Tensor({n_tok, e_dim});
  g.ddelta = Tensor({n_tok, e_dim});
  g.db = Tensor({n_tok, n_dim});
  g.dc = Tensor({n_tok, n_dim});
  g.da = Tensor({e_dim, n_dim});
  g.dd = Tensor({static_cast<int>(d_skip.numel())});

  // Skip-path and C gradients need no recurrence.
  for (int t = 0; t < n_tok; ++t)
    for (int e = 0; e < e_dim; ++e) {
      const double gv = go.at(t, e);
      if (d_skip.numel() > 0) {
        g.du.at(t, e) += gv * d_skip[e];
        g.dd[e] += gv * u.at(t, e);
      }
      for (int n = 0; n < n_dim; ++n) g.dc.at(t, n) += gv * h_saved.at3(t, e, n);
    }

  // lambda[e][n] carries dL/dh_t while sweeping t downward.
  std::vector<double> lambda(static_cast<size_t>(e_dim) * n_dim, 0.0);
  const bool zoh = disc == Discretization::Zoh;
  for (int t = n_tok - 1; t >= 0; --t)
    for (int e = 0; e < e_dim; ++e) {
      const double d = delta.at(t, e);
      const double uv = u.at(t, e);
      const double gv = go.at(t, e);
      double* lam = lambda.data() + static_cast<size_t>(e) * n_dim;
      double dd_acc = 0;
      for (int n = 0; n < n_dim; ++n) {
        const double av = a.at(e, n);
        const double z = d * av;
        const double abar = std::exp(z);
        const double l = lam[n] + c_seq.at(t, n) * gv;
        const double h_prev = t > 0 ? h_saved.at3(t - 1, e, n) : 0.0;
        // decay path: a_bar = exp(delta A)
        const double dabar = l * h_prev;
        dd_acc += dabar * av * abar;
        g.da.at(e, n) += dabar * d * abar;
        // input path: b_bar = delta phi1(z) B (zoh) or delta B (euler)
        const double bv = b_seq.at(t, n);
        const double factor = zoh ? d * phi1(z) : d;
        g.db.at(t, n) += l * factor * uv;
        g.du.at(t, e) += l * factor * bv;
        if (zoh) {
          dd_acc += l * bv * uv * abar;  // d(delta phi1)/d delta = exp(z)
          g.da.at(e, n) += l * bv * uv * d * d * phi1_grad(z);
        } else {
          dd_acc += l * bv * uv;
        }
        lam[n] = l * abar;
      }
      g.ddelta.at(t, e) = dd_acc;
    }
  return g;
}

}  // namespace mam
