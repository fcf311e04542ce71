#pragma once

#include "mam/params.hpp"
#include "mam/ssm.hpp"
#include "mam/tape.hpp"

namespace mam {

// One selective-SSM mixer: input projections to the expanded width, causal
// depthwise conv, input-dependent scan, gated output projection. The same
// parameter set serves the forward, flipped (bi) and cross uses.
template <class T>
struct MambaModuleParamsT {
  TensorT<T> w_in_x;     // [D, E]
  TensorT<T> w_in_gate;  // [D, E]
  TensorT<T> conv_k;     // [E, w], tau 0 multiplies the current token
  TensorT<T> conv_b;     // [E]
  SelectiveSsmParamsT<T> ssm;
  TensorT<T> w_out;  // [E, D]

  int d_model() const { return w_in_x.shape[0]; }
  int e_dim() const { return w_in_x.shape[1]; }
  int n_state() const { return ssm.a_log.shape[1]; }
  int conv_width() const { return conv_k.shape[1]; }
  int src_dim() const { return ssm.w_c.shape[0]; }
};
using MambaModuleParams = MambaModuleParamsT<double>;

// Residual block: x + module(layer_norm(x)).
template <class T>
struct MambaBlockParamsT {
  MambaModuleParamsT<T> m;
  TensorT<T> ln_scale;   // [D]
  TensorT<T> ln_offset;  // [D]
};
using MambaBlockParams = MambaBlockParamsT<double>;

template <class T, class F>
void visit_params(MambaModuleParamsT<T>& p, F&& f, const std::string& prefix = "") {
  f(prefix + "w_in_x", p.w_in_x);
  f(prefix + "w_in_gate", p.w_in_gate);
  f(prefix + "conv_k", p.conv_k);
  f(prefix + "conv_b", p.conv_b);
  f(prefix + "ssm.a_log", p.ssm.a_log);
  f(prefix + "ssm.d_skip", p.ssm.d_skip);
  f(prefix + "ssm.w_b", p.ssm.w_b);
  f(prefix + "ssm.w_c", p.ssm.w_c);
  f(prefix + "ssm.w_dt_down", p.ssm.w_dt_down);
  f(prefix + "ssm.w_dt_up", p.ssm.w_dt_up);
  f(prefix + "ssm.dt_bias", p.ssm.dt_bias);
  f(prefix + "w_out", p.w_out);
}

template <class T, class F>
void visit_params(MambaBlockParamsT<T>& p, F&& f, const std::string& prefix = "") {
  visit_params(p.m, f, prefix + "m.");
  f(prefix + "ln_scale", p.ln_scale);
  f(prefix + "ln_offset", p.ln_offset);
}

// Fan-in uniform init for projections; state matrix starts at -A = 1..N per
// channel (stored as log), step-size bias set so softplus lands in
// [dt_min, dt_max] log-uniformly.
inline MambaModuleParams init_mamba_module(Rng& rng, int d_model, int n_state, int dt_rank,
                                           int conv_width, int src_dim = -1) {
  check(d_model > 0 && n_state > 0 && dt_rank > 0 && conv_width > 0,
        "init_mamba_module: dims must be positive");
  const int e_dim = 2 * d_model;
  const int sdim = src_dim < 0 ? e_dim : src_dim;
  auto fan_in = [&](int rows, int cols) {
    const double b = 1.0 / std::sqrt(static_cast<double>(rows));
    return rand_uniform<double>(rng, {rows, cols}, -b, b);
  };
  MambaModuleParams p;
  p.w_in_x = fan_in(d_model, e_dim);
  p.w_in_gate = fan_in(d_model, e_dim);
  p.conv_k = rand_uniform<double>(rng, {e_dim, conv_width}, -1.0 / std::sqrt(conv_width),
                                  1.0 / std::sqrt(conv_width));
  p.conv_b = Tensor::zeros({e_dim});
  p.ssm.a_log = Tensor({e_dim, n_state});
  for (int e = 0; e < e_dim; ++e)
    for (int n = 0; n < n_state; ++n) p.ssm.a_log.at(e, n) = std::log(static_cast<double>(n + 1));
  p.ssm.d_skip = Tensor::ones({e_dim});
  p.ssm.w_b = fan_in(e_dim, n_state);
  p.ssm.w_c = fan_in(sdim, n_state);
  p.ssm.w_dt_down = fan_in(e_dim, dt_rank);
  p.ssm.w_dt_up = fan_in(dt_rank, e_dim);
  p.ssm.dt_bias = Tensor({e_dim});
  for (int e = 0; e < e_dim; ++e) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    p.ssm.dt_bias[e] = std::log(std::expm1(dt));  // softplus inverse
  }
  p.w_out = fan_in(e_dim, d_model);
  return p;
}

inline MambaBlockParams init_mamba_block(Rng& rng, int d_model, int n_state, int dt_rank,
                                         int conv_width, int src_dim = -1) {
  MambaBlockParams p;
  p.m = init_mamba_module(rng, d_model, n_state, dt_rank, conv_width, src_dim);
  p.ln_scale = Tensor::ones({d_model});
  p.ln_offset = Tensor::zeros({d_model});
  return p;
}

// ---------------------------------------------------------------------------
// Tape forward (training path)
// ---------------------------------------------------------------------------

// source: null for the self variant; for the cross variant the output map
// C_t is read from the source sequence and everything else from x.
inline Ref mamba_module_tape(Tape& t, Binder& bind, const MambaModuleParams& p, Ref x,
                             Discretization disc, const Ref* source = nullptr) {
  Ref xz = t.matmul(x, bind(p.w_in_x));
  Ref gate = t.matmul(x, bind(p.w_in_gate));
  Ref u = t.pointwise(Act::Silu, t.causal_conv(xz, bind(p.conv_k), bind(p.conv_b)));
  Ref delta = t.pointwise(
      Act::Softplus,
      t.add_bias(t.matmul(t.matmul(u, bind(p.ssm.w_dt_down)), bind(p.ssm.w_dt_up)),
                 bind(p.ssm.dt_bias)));
  Ref b_seq = t.matmul(u, bind(p.ssm.w_b));
  Ref c_seq = t.matmul(source ? *source : u, bind(p.ssm.w_c));
  Ref a = t.scale(t.pointwise(Act::Exp, bind(p.ssm.a_log)), -1.0);
  Ref y = t.selective_scan(u, delta, b_seq, c_seq, a, bind(p.ssm.d_skip), disc);
  return t.matmul(t.mul(y, t.pointwise(Act::Silu, gate)), bind(p.w_out));
}

inline Ref mamba_block_tape(Tape& t, Binder& bind, const MambaBlockParams& p, Ref x,
                            Discretization disc) {
  Ref z = t.layer_norm(x, bind(p.ln_scale), bind(p.ln_offset));
  return t.add(x, mamba_module_tape(t, bind, p.m, z, disc));
}

// Forward and reversed passes share one module parameter set; merge is a sum.
inline Ref bimamba_block_tape(Tape& t, Binder& bind, const MambaBlockParams& p, Ref x,
                              Discretization disc) {
  Ref z = t.layer_norm(x, bind(p.ln_scale), bind(p.ln_offset));
  Ref fwd = mamba_module_tape(t, bind, p.m, z, disc);
  Ref rev = t.flip_rows(mamba_module_tape(t, bind, p.m, t.flip_rows(z), disc));
  return t.add(t.add(x, fwd), rev);
}

inline Ref crossmamba_block_tape(Tape& t, Binder& bind, const MambaBlockParams& p, Ref x,
                                 Ref source, Discretization disc) {
  Ref z = t.layer_norm(x, bind(p.ln_scale), bind(p.ln_offset));
  return t.add(x, mamba_module_tape(t, bind, p.m, z, disc, &source));
}

// ---------------------------------------------------------------------------
// Plain forward (inference path); same math, no tape
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> causal_conv1d(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias) {
  check(x.ndim() == 2 && kernel.ndim() == 2 && kernel.shape[0] == x.shape[1],
        "causal_conv1d: kernel [E,w] vs input [L,E]");
  check(bias.numel() == x.shape[1], "causal_conv1d: bias length");
  const int n_tok = x.shape[0], e_dim = x.shape[1], w = kernel.shape[1];
  TensorT<T> y({n_tok, e_dim});
  for (int t = 0; t < n_tok; ++t)
    for (int e = 0; e < e_dim; ++e) {
      T acc = bias[e];
      for (int tau = 0; tau < w && tau <= t; ++tau) acc += kernel.at(e, tau) * x.at(t - tau, e);
      y.at(t, e) = acc;
    }
  return y;
}

template <class T>
TensorT<T> mamba_module_plain(const MambaModuleParamsT<T>& p, const TensorT<T>& x,
                              Discretization disc, const TensorT<T>* source = nullptr) {
  TensorT<T> u = pointwise(Act::Silu, causal_conv1d(matmul(x, p.w_in_x), p.conv_k, p.conv_b));
  TensorT<T> gate = pointwise(Act::Silu, matmul(x, p.w_in_gate));
  TensorT<T> delta = selective_delta(u, p.ssm);
  TensorT<T> b_seq = selective_b(u, p.ssm);
  TensorT<T> c_seq = selective_c(source ? *source : u, p.ssm);
  TensorT<T> a = neg_exp(p.ssm.a_log);
  ScanStepsT<T> steps = build_scan_steps(u, delta, b_seq, c_seq, a, disc);
  TensorT<T> y = scan_sequential(steps, u, p.ssm.d_skip);
  for (long long i = 0; i < y.numel(); ++i) y[i] *= gate[i];
  return matmul(y, p.w_out);
}

template <class T>
TensorT<T> mamba_block_plain(const MambaBlockParamsT<T>& p, const TensorT<T>& x,
                             Discretization disc) {
  TensorT<T> z = layer_norm(x, p.ln_scale, p.ln_offset);
  TensorT<T> y = mamba_module_plain(p.m, z, disc);
  for (long long i = 0; i < y.numel(); ++i) y[i] += x[i];
  return y;
}

template <class T>
TensorT<T> bimamba_block_plain(const MambaBlockParamsT<T>& p, const TensorT<T>& x,
                               Discretization disc) {
  TensorT<T> z = layer_norm(x, p.ln_scale, p.ln_offset);
  TensorT<T> fwd = mamba_module_plain(p.m, z, disc);
  TensorT<T> rev = flip_rows(mamba_module_plain(p.m, flip_rows(z), disc));
  TensorT<T> y = x;
  for (long long i = 0; i < y.numel(); ++i) y[i] = (y[i] + fwd[i]) + rev[i];
  return y;
}

template <class T>
TensorT<T> crossmamba_block_plain(const MambaBlockParamsT<T>& p, const TensorT<T>& x,
                                  const TensorT<T>& source, Discretization disc) {
  check(source.shape[0] == x.shape[0], "crossmamba: source length vs target length");
  TensorT<T> z = layer_norm(x, p.ln_scale, p.ln_offset);
  TensorT<T> y = mamba_module_plain(p.m, z, disc, &source);
  for (long long i = 0; i < y.numel(); ++i) y[i] += x[i];
  return y;
}

// ---------------------------------------------------------------------------
// Streaming forward: one token at a time with O(1) per-step state
// ---------------------------------------------------------------------------

template <class T>
struct MambaStreamT {
  TensorT<T> conv_hist;  // [w, E] ring buffer over the expanded input
  TensorT<T> h;          // [E, N] scan state
  int count = 0;

  void reset(const MambaModuleParamsT<T>& p) {
    conv_hist = TensorT<T>({p.conv_width(), p.e_dim()});
    h = TensorT<T>({p.e_dim(), p.n_state()});
    count = 0;
  }
};
using MambaStream = MambaStreamT<double>;

// x_row: one token [D]; src_row: aligned source token for the cross variant.
// Matches the full-sequence path exactly: the ring buffer reproduces the
// zero left-padding of causal_conv1d.
template <class T>
std::vector<T> mamba_module_step(const MambaModuleParamsT<T>& p, MambaStreamT<T>& st,
                                 const T* x_row, Discretization disc,
                                 const T* src_row = nullptr) {
  const int d = p.d_model(), e_dim = p.e_dim(), n_dim = p.n_state(), w = p.conv_width();
  const int slot = st.count % w;
  for (int e = 0; e < e_dim; ++e) {
    T acc = 0;
    for (int i = 0; i < d; ++i) acc += x_row[i] * p.w_in_x.at(i, e);
    st.conv_hist.at(slot, e) = acc;
  }
  std::vector<T> u(e_dim), gate(e_dim);
  for (int e = 0; e < e_dim; ++e) {
    T acc = p.conv_b[e];
    for (int tau = 0; tau < w && tau <= st.count; ++tau)
      acc += p.conv_k.at(e, tau) * st.conv_hist.at((st.count - tau) % w, e);
    u[e] = static_cast<T>(silu_s(static_cast<double>(acc)));
    T g = 0;
    for (int i = 0; i < d; ++i) g += x_row[i] * p.w_in_gate.at(i, e);
    gate[e] = static_cast<T>(silu_s(static_cast<double>(g)));
  }
  ++st.count;

  const int r = p.ssm.w_dt_down.shape[1];
  std::vector<T> low(r, T(0));
  for (int e = 0; e < e_dim; ++e)
    for (int j = 0; j < r; ++j) low[j] += u[e] * p.ssm.w_dt_down.at(e, j);
  std::vector<T> delta(e_dim);
  for (int e = 0; e < e_dim; ++e) {
    T acc = p.ssm.dt_bias[e];
    for (int j = 0; j < r; ++j) acc += low[j] * p.ssm.w_dt_up.at(j, e);
    delta[e] = static_cast<T>(softplus_s(static_cast<double>(acc)));
  }
  std::vector<T> b_row(n_dim, T(0)), c_row(n_dim, T(0));
  for (int e = 0; e < e_dim; ++e)
    for (int n = 0; n < n_dim; ++n) b_row[n] += u[e] * p.ssm.w_b.at(e, n);
  if (src_row) {
    const int sdim = p.src_dim();
    for (int i = 0; i < sdim; ++i)
      for (int n = 0; n < n_dim; ++n) c_row[n] += src_row[i] * p.ssm.w_c.at(i, n);
  } else {
    for (int e = 0; e < e_dim; ++e)
      for (int n = 0; n < n_dim; ++n) c_row[n] += u[e] * p.ssm.w_c.at(e, n);
  }

  std::vector<T> mixed(e_dim);
  const bool zoh = disc == Discretization::Zoh;
  for (int e = 0; e < e_dim; ++e) {
    const double dv = static_cast<double>(delta[e]);
    T acc = 0;
    for (int n = 0; n < n_dim; ++n) {
      const double a = -std::exp(static_cast<double>(p.ssm.a_log.at(e, n)));
      const double z = dv * a;
      const double bb = zoh ? dv * phi1(z) : dv;
      st.h.at(e, n) = static_cast<T>(std::exp(z)) * st.h.at(e, n) +
                      static_cast<T>(bb) * b_row[n] * u[e];
      acc += c_row[n] * st.h.at(e, n);
    }
    mixed[e] = (acc + p.ssm.d_skip[e] * u[e]) * gate[e];
  }
  std::vector<T> out(d, T(0));
  for (int e = 0; e < e_dim; ++e)
    for (int i = 0; i < d; ++i) out[i] += mixed[e] * p.w_out.at(e, i);
  return out;
}

template <class T>
std::vector<T> ln_row(const T* x, int d, const TensorT<T>& scale, const TensorT<T>& offset) {
  double mu = 0;
  for (int j = 0; j < d; ++j) mu += static_cast<double>(x[j]);
  mu /= d;
  double var = 0;
  for (int j = 0; j < d; ++j) {
    const double c = static_cast<double>(x[j]) - mu;
    var += c * c;
  }
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  std::vector<T> y(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j)
    y[j] = static_cast<T>((static_cast<double>(x[j]) - mu) * rstd *
                              static_cast<double>(scale[j]) +
                          static_cast<double>(offset[j]));
  return y;
}

// Residual block step over a single token; src_row selects the cross variant.
template <class T>
std::vector<T> mamba_block_step(const MambaBlockParamsT<T>& p, MambaStreamT<T>& st, const T* x_row,
                                Discretization disc, const T* src_row = nullptr) {
  std::vector<T> z = ln_row(x_row, p.m.d_model(), p.ln_scale, p.ln_offset);
  std::vector<T> y = mamba_module_step(p.m, st, z.data(), disc, src_row);
  for (int i = 0; i < p.m.d_model(); ++i) y[i] += x_row[i];
  return y;
}

}  // namespace mam
