#pragma once

#include <variant>

#include "mam/attention.hpp"
#include "mam/mamba.hpp"
#include "mam/model_config.hpp"

namespace mam {

// Encoder-decoder policy/value model over agent tokens: bi-directional scan
// blocks embed the joint observation, a causal decoder emits one action per
// agent conditioned on earlier agents' actions and, through the cross blocks,
// on the encoded observation.
template <class T>
struct MamParamsT {
  TensorT<T> obs_w, obs_b;  // [obs_in, D], [D]
  TensorT<T> act_table;     // [n_actions + 1, D]; last row is the start token
  std::vector<MambaBlockParamsT<T>> enc;        // bi-directional blocks
  TensorT<T> enc_ln_scale, enc_ln_offset;
  TensorT<T> vhead_w, vhead_b;                  // [D, 1], [1]
  std::vector<MambaBlockParamsT<T>> dec_self;   // causal blocks
  std::vector<MambaBlockParamsT<T>> dec_cross;  // cross blocks, source dim D
  TensorT<T> dec_ln_scale, dec_ln_offset;
  TensorT<T> phead_w, phead_b;  // [D, n_actions]
};
using MamParams = MamParamsT<double>;

template <class T, class F>
void visit_params(MamParamsT<T>& p, F&& f) {
  f("obs_w", p.obs_w);
  f("obs_b", p.obs_b);
  f("act_table", p.act_table);
  for (size_t i = 0; i < p.enc.size(); ++i)
    visit_params(p.enc[i], f, "enc" + std::to_string(i) + ".");
  f("enc_ln_scale", p.enc_ln_scale);
  f("enc_ln_offset", p.enc_ln_offset);
  f("vhead_w", p.vhead_w);
  f("vhead_b", p.vhead_b);
  for (size_t i = 0; i < p.dec_self.size(); ++i) {
    visit_params(p.dec_self[i], f, "dec_self" + std::to_string(i) + ".");
    visit_params(p.dec_cross[i], f, "dec_cross" + std::to_string(i) + ".");
  }
  f("dec_ln_scale", p.dec_ln_scale);
  f("dec_ln_offset", p.dec_ln_offset);
  f("phead_w", p.phead_w);
  f("phead_b", p.phead_b);
}

inline MamParams init_mam_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.d_model, in = cfg.input_dim();
  auto fan_in = [&](int rows, int cols) {
    const double b = 1.0 / std::sqrt(static_cast<double>(rows));
    return rand_uniform<double>(rng, {rows, cols}, -b, b);
  };
  MamParams p;
  p.obs_w = fan_in(in, d);
  p.obs_b = Tensor::zeros({d});
  p.act_table = rand_normal<double>(rng, {cfg.n_actions + 1, d}, 0.02);
  for (int i = 0; i < cfg.n_blocks; ++i)
    p.enc.push_back(init_mamba_block(rng, d, cfg.n_state, cfg.dt_rank, cfg.conv_width));
  p.enc_ln_scale = Tensor::ones({d});
  p.enc_ln_offset = Tensor::zeros({d});
  p.vhead_w = fan_in(d, 1);
  p.vhead_b = Tensor::zeros({1});
  for (int i = 0; i < cfg.n_blocks; ++i) {
    p.dec_self.push_back(init_mamba_block(rng, d, cfg.n_state, cfg.dt_rank, cfg.conv_width));
    p.dec_cross.push_back(
        init_mamba_block(rng, d, cfg.n_state, cfg.dt_rank, cfg.conv_width, /*src_dim=*/d));
  }
  p.dec_ln_scale = Tensor::ones({d});
  p.dec_ln_offset = Tensor::zeros({d});
  p.phead_w = fan_in(d, cfg.n_actions);
  p.phead_b = Tensor::zeros({cfg.n_actions});
  return p;
}

// ---------------------------------------------------------------------------
// Tape path
// ---------------------------------------------------------------------------
inline TapeEncodeOut mam_encode_tape(Tape& t, Binder& bind, const MamParams& p, const Tensor& obs,
                                     Discretization disc) {
  Ref x = t.gelu(t.add_bias(t.matmul(t.constant(obs), bind(p.obs_w)), bind(p.obs_b)));
  for (const auto& b : p.enc) x = bimamba_block_tape(t, bind, b, x, disc);
  Ref repr = t.layer_norm(x, bind(p.enc_ln_scale), bind(p.enc_ln_offset));
  Ref values = t.reshape(t.add_bias(t.matmul(repr, bind(p.vhead_w)), bind(p.vhead_b)),
                         {t.val(repr).shape[0]});
  return {repr, values};
}

inline Ref mam_decode_parallel_tape(Tape& t, Binder& bind, const MamParams& p, Ref repr,
                                    const std::vector<int>& actions, const ModelConfig& cfg) {
  check(static_cast<int>(actions.size()) == t.val(repr).shape[0],
        "decode: one action per agent token");
  std::vector<int> ids = shifted_action_ids(actions, cfg.start_token(), cfg.n_actions);
  Ref x = t.gather_rows(bind(p.act_table), ids);
  for (size_t i = 0; i < p.dec_self.size(); ++i) {
    x = mamba_block_tape(t, bind, p.dec_self[i], x, cfg.disc);
    x = crossmamba_block_tape(t, bind, p.dec_cross[i], x, repr, cfg.disc);
  }
  Ref h = t.layer_norm(x, bind(p.dec_ln_scale), bind(p.dec_ln_offset));
  return t.add_bias(t.matmul(h, bind(p.phead_w)), bind(p.phead_b));
}

// ---------------------------------------------------------------------------
// Plain path
// ---------------------------------------------------------------------------
template <class T>
PlainEncodeOut<T> mam_encode_plain(const MamParamsT<T>& p, const TensorT<T>& obs,
                                   Discretization disc) {
  TensorT<T> x = linear(obs, p.obs_w, p.obs_b);
  for (auto& v : x.data) v = static_cast<T>(gelu_s(static_cast<double>(v)));
  for (const auto& b : p.enc) x = bimamba_block_plain(b, x, disc);
  TensorT<T> repr = layer_norm(x, p.enc_ln_scale, p.enc_ln_offset);
  TensorT<T> v2 = linear(repr, p.vhead_w, p.vhead_b);
  TensorT<T> values({repr.shape[0]});
  for (int i = 0; i < repr.shape[0]; ++i) values[i] = v2.at(i, 0);
  return {std::move(repr), std::move(values)};
}

template <class T>
TensorT<T> mam_decode_parallel_plain(const MamParamsT<T>& p, const TensorT<T>& repr,
                                     const std::vector<int>& actions, const ModelConfig& cfg) {
  std::vector<int> ids = shifted_action_ids(actions, cfg.start_token(), cfg.n_actions);
  TensorT<T> x({static_cast<int>(ids.size()), p.act_table.shape[1]});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(&p.act_table.at(ids[i], 0), &p.act_table.at(ids[i], 0) + p.act_table.shape[1],
              &x.at(static_cast<int>(i), 0));
  // cross blocks read source rows aligned with the target prefix
  TensorT<T> src({x.shape[0], repr.shape[1]});
  std::copy(repr.data.begin(), repr.data.begin() + src.numel(), src.data.begin());
  for (size_t i = 0; i < p.dec_self.size(); ++i) {
    x = mamba_block_plain(p.dec_self[i], x, cfg.disc);
    x = crossmamba_block_plain(p.dec_cross[i], x, src, cfg.disc);
  }
  TensorT<T> h = layer_norm(x, p.dec_ln_scale, p.dec_ln_offset);
  return linear(h, p.phead_w, p.phead_b);
}

// Incremental decoder state: one stream per decoder block, O(1) memory and
// per-step work in the number of agents.
template <class T>
struct MamDecodeStateT {
  std::vector<MambaStreamT<T>> self_st;
  std::vector<MambaStreamT<T>> cross_st;
  int pos = 0;

  void reset(const MamParamsT<T>& p) {
    self_st.resize(p.dec_self.size());
    cross_st.resize(p.dec_cross.size());
    for (size_t i = 0; i < p.dec_self.size(); ++i) {
      self_st[i].reset(p.dec_self[i].m);
      cross_st[i].reset(p.dec_cross[i].m);
    }
    pos = 0;
  }
};
using MamDecodeState = MamDecodeStateT<double>;

// One agent step: consume the previous token id, return this position's
// logits. repr_row is the encoder representation for this position.
template <class T>
std::vector<T> mam_decode_step(const MamParamsT<T>& p, MamDecodeStateT<T>& st, int prev_token,
                               const T* repr_row, const ModelConfig& cfg) {
  const int d = p.act_table.shape[1];
  std::vector<T> x(&p.act_table.at(prev_token, 0), &p.act_table.at(prev_token, 0) + d);
  for (size_t i = 0; i < p.dec_self.size(); ++i) {
    x = mamba_block_step(p.dec_self[i], st.self_st[i], x.data(), cfg.disc);
    x = mamba_block_step(p.dec_cross[i], st.cross_st[i], x.data(), cfg.disc, repr_row);
  }
  std::vector<T> h = ln_row(x.data(), d, p.dec_ln_scale, p.dec_ln_offset);
  std::vector<T> logits(static_cast<size_t>(cfg.n_actions), T(0));
  for (int j = 0; j < cfg.n_actions; ++j) {
    T acc = p.phead_b[j];
    for (int e = 0; e < d; ++e) acc += h[e] * p.phead_w.at(e, j);
    logits[j] = acc;
  }
  ++st.pos;
  return logits;
}

enum class DecodeMode : uint8_t { Incremental, Recompute };

// Greedy/sampled autoregressive decode. Incremental mode carries recurrent
// state between agent steps; recompute mode rebuilds the prefix every step
// through the parallel path (used to cross-check the state handling).
template <class T>
std::vector<int> mam_decode_autoregressive(const MamParamsT<T>& p, const TensorT<T>& repr,
                                           const ModelConfig& cfg, Rng* rng,
                                           TensorT<T>* logits_out = nullptr,
                                           DecodeMode mode = DecodeMode::Incremental) {
  const int n = repr.shape[0];
  std::vector<int> actions;
  if (logits_out) *logits_out = TensorT<T>({n, cfg.n_actions});
  if (mode == DecodeMode::Recompute) {
    for (int i = 0; i < n; ++i) {
      std::vector<int> prefix = actions;
      prefix.push_back(0);  // placeholder beyond the read prefix
      TensorT<T> logits = mam_decode_parallel_plain(p, repr, prefix, cfg);
      if (logits_out)
        for (int j = 0; j < cfg.n_actions; ++j) logits_out->at(i, j) = logits.at(i, j);
      actions.push_back(sample_logits_row(logits, i, rng));
    }
    return actions;
  }
  MamDecodeStateT<T> st;
  st.reset(p);
  int prev = cfg.start_token();
  TensorT<T> row({1, cfg.n_actions});
  for (int i = 0; i < n; ++i) {
    std::vector<T> logits = mam_decode_step(p, st, prev, &repr.at(i, 0), cfg);
    std::copy(logits.begin(), logits.end(), row.data.begin());
    if (logits_out)
      for (int j = 0; j < cfg.n_actions; ++j) logits_out->at(i, j) = logits[j];
    prev = sample_logits_row(row, 0, rng);
    actions.push_back(prev);
  }
  return actions;
}

// ---------------------------------------------------------------------------
// Model-kind dispatch used by the harness
// ---------------------------------------------------------------------------
struct Policy {
  ModelConfig cfg;
  std::variant<MamParams, MatParams> params;

  bool is_mam() const { return std::holds_alternative<MamParams>(params); }
  MamParams& mam() { return std::get<MamParams>(params); }
  const MamParams& mam() const { return std::get<MamParams>(params); }
  MatParams& mat() { return std::get<MatParams>(params); }
  const MatParams& mat() const { return std::get<MatParams>(params); }
};

template <class F>
void visit_params(Policy& p, F&& f) {
  if (p.is_mam())
    visit_params(p.mam(), f);
  else
    visit_params(p.mat(), f);
}

inline Policy init_policy(const ModelConfig& cfg, uint64_t seed) {
  Policy p;
  p.cfg = cfg;
  if (cfg.kind == ModelKind::Mam)
    p.params = init_mam_model(cfg, seed);
  else
    p.params = init_mat_model(cfg, seed);
  return p;
}

inline PlainEncodeOut<double> policy_encode(const Policy& p, const Tensor& obs) {
  return p.is_mam() ? mam_encode_plain(p.mam(), obs, p.cfg.disc) : mat_encode_plain(p.mat(), obs);
}

inline std::vector<int> policy_decode_ar(const Policy& p, const Tensor& repr, Rng* rng,
                                         Tensor* logits_out = nullptr) {
  return p.is_mam() ? mam_decode_autoregressive(p.mam(), repr, p.cfg, rng, logits_out)
                    : mat_decode_autoregressive(p.mat(), repr, p.cfg, rng, logits_out);
}

inline TapeEncodeOut policy_encode_tape(Tape& t, Binder& bind, const Policy& p,
                                        const Tensor& obs) {
  return p.is_mam() ? mam_encode_tape(t, bind, p.mam(), obs, p.cfg.disc)
                    : mat_encode_tape(t, bind, p.mat(), obs);
}

inline Ref policy_decode_parallel_tape(Tape& t, Binder& bind, const Policy& p, Ref repr,
                                       const std::vector<int>& actions) {
  return p.is_mam() ? mam_decode_parallel_tape(t, bind, p.mam(), repr, actions, p.cfg)
                    : mat_decode_parallel_tape(t, bind, p.mat(), repr, actions, p.cfg);
}

// ---------------------------------------------------------------------------
// Precision casts (benchmark path may run single precision end to end)
// ---------------------------------------------------------------------------
template <class U, class T>
SelectiveSsmParamsT<U> cast_ssm(const SelectiveSsmParamsT<T>& p) {
  return {p.a_log.template cast<U>(),     p.d_skip.template cast<U>(),
          p.w_b.template cast<U>(),       p.w_c.template cast<U>(),
          p.w_dt_down.template cast<U>(), p.w_dt_up.template cast<U>(),
          p.dt_bias.template cast<U>()};
}

template <class U, class T>
MambaBlockParamsT<U> cast_block(const MambaBlockParamsT<T>& p) {
  MambaBlockParamsT<U> o;
  o.m.w_in_x = p.m.w_in_x.template cast<U>();
  o.m.w_in_gate = p.m.w_in_gate.template cast<U>();
  o.m.conv_k = p.m.conv_k.template cast<U>();
  o.m.conv_b = p.m.conv_b.template cast<U>();
  o.m.ssm = cast_ssm<U>(p.m.ssm);
  o.m.w_out = p.m.w_out.template cast<U>();
  o.ln_scale = p.ln_scale.template cast<U>();
  o.ln_offset = p.ln_offset.template cast<U>();
  return o;
}

template <class U, class T>
MamParamsT<U> cast_mam(const MamParamsT<T>& p) {
  MamParamsT<U> o;
  o.obs_w = p.obs_w.template cast<U>();
  o.obs_b = p.obs_b.template cast<U>();
  o.act_table = p.act_table.template cast<U>();
  for (const auto& b : p.enc) o.enc.push_back(cast_block<U>(b));
  o.enc_ln_scale = p.enc_ln_scale.template cast<U>();
  o.enc_ln_offset = p.enc_ln_offset.template cast<U>();
  o.vhead_w = p.vhead_w.template cast<U>();
  o.vhead_b = p.vhead_b.template cast<U>();
  for (const auto& b : p.dec_self) o.dec_self.push_back(cast_block<U>(b));
  for (const auto& b : p.dec_cross) o.dec_cross.push_back(cast_block<U>(b));
  o.dec_ln_scale = p.dec_ln_scale.template cast<U>();
  o.dec_ln_offset = p.dec_ln_offset.template cast<U>();
  o.phead_w = p.phead_w.template cast<U>();
  o.phead_b = p.phead_b.template cast<U>();
  return o;
}

template <class U, class T>
MhaParamsT<U> cast_mha(const MhaParamsT<T>& p) {
  MhaParamsT<U> o;
  for (const auto& w : p.wq) o.wq.push_back(w.template cast<U>());
  for (const auto& w : p.wk) o.wk.push_back(w.template cast<U>());
  for (const auto& w : p.wv) o.wv.push_back(w.template cast<U>());
  for (const auto& w : p.wo) o.wo.push_back(w.template cast<U>());
  o.b_out = p.b_out.template cast<U>();
  return o;
}

template <class U, class T>
MatParamsT<U> cast_mat(const MatParamsT<T>& p) {
  MatParamsT<U> o;
  o.obs_w = p.obs_w.template cast<U>();
  o.obs_b = p.obs_b.template cast<U>();
  o.act_table = p.act_table.template cast<U>();
  for (const auto& b : p.enc) {
    AttnEncBlockT<U> e;
    e.att = cast_mha<U>(b.att);
    e.ln1_scale = b.ln1_scale.template cast<U>();
    e.ln1_offset = b.ln1_offset.template cast<U>();
    e.ff = {b.ff.w1.template cast<U>(), b.ff.b1.template cast<U>(), b.ff.w2.template cast<U>(),
            b.ff.b2.template cast<U>()};
    e.ln2_scale = b.ln2_scale.template cast<U>();
    e.ln2_offset = b.ln2_offset.template cast<U>();
    o.enc.push_back(std::move(e));
  }
  o.vhead_w = p.vhead_w.template cast<U>();
  o.vhead_b = p.vhead_b.template cast<U>();
  for (const auto& b : p.dec) {
    AttnDecBlockT<U> e;
    e.self_att = cast_mha<U>(b.self_att);
    e.ln1_scale = b.ln1_scale.template cast<U>();
    e.ln1_offset = b.ln1_offset.template cast<U>();
    e.cross_att = cast_mha<U>(b.cross_att);
    e.lnc_scale = b.lnc_scale.template cast<U>();
    e.lnc_offset = b.lnc_offset.template cast<U>();
    e.ff = {b.ff.w1.template cast<U>(), b.ff.b1.template cast<U>(), b.ff.w2.template cast<U>(),
            b.ff.b2.template cast<U>()};
    e.ln2_scale = b.ln2_scale.template cast<U>();
    e.ln2_offset = b.ln2_offset.template cast<U>();
    o.dec.push_back(std::move(e));
  }
  o.phead_w = p.phead_w.template cast<U>();
  o.phead_b = p.phead_b.template cast<U>();
  return o;
}

}  // namespace mam
