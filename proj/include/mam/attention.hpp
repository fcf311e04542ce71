#pragma once

#include "mam/model_config.hpp"
#include "mam/params.hpp"
#include "mam/tape.hpp"

namespace mam {

// ---------------------------------------------------------------------------
// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V, optionally with
// a causal (lower-triangular) mask. Q rows and K/V rows may differ in count.
// ---------------------------------------------------------------------------
// Normalized attention matrix; masked entries are exactly zero.
template <class T>
TensorT<T> attention_weights(const TensorT<T>& q, const TensorT<T>& k, bool causal) {
  check(q.shape[1] == k.shape[1], "attention: q/k feature dims differ");
  TensorT<T> scores = matmul_bt(q, k);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.shape[1]));
  const int r = scores.shape[0], c = scores.shape[1];
  TensorT<T> lam({r, c});
  for (int i = 0; i < r; ++i) {
    const int lim = causal ? std::min(i + 1, c) : c;
    double mx = static_cast<double>(scores.at(i, 0)) * inv;
    for (int j = 1; j < lim; ++j) mx = std::max(mx, static_cast<double>(scores.at(i, j)) * inv);
    double z = 0;
    for (int j = 0; j < lim; ++j) z += std::exp(static_cast<double>(scores.at(i, j)) * inv - mx);
    for (int j = 0; j < lim; ++j)
      lam.at(i, j) = static_cast<T>(std::exp(static_cast<double>(scores.at(i, j)) * inv - mx) / z);
  }
  return lam;
}

template <class T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, bool causal) {
  check(k.shape[0] == v.shape[0], "attention: k/v row counts differ");
  return matmul(attention_weights(q, k, causal), v);
}

inline Ref attention_tape(Tape& t, Ref q, Ref k, Ref v, bool causal) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(t.val(q).shape[1]));
  Ref lam = t.softmax_rows(t.scale(t.matmul_bt(q, k), inv), causal);
  return t.matmul(lam, v);
}

// Multi-head projections; per-head output maps summed in place of a concat.
template <class T>
struct MhaParamsT {
  std::vector<TensorT<T>> wq, wk, wv;  // H x [D, dk]
  std::vector<TensorT<T>> wo;          // H x [dk, D]
  TensorT<T> b_out;                    // [D]
  int heads() const { return static_cast<int>(wq.size()); }
};

template <class T>
struct FfParamsT {
  TensorT<T> w1, b1;  // [D, 4D], [4D]
  TensorT<T> w2, b2;  // [4D, D], [D]
};

template <class T>
struct AttnEncBlockT {
  MhaParamsT<T> att;
  TensorT<T> ln1_scale, ln1_offset;
  FfParamsT<T> ff;
  TensorT<T> ln2_scale, ln2_offset;
};

template <class T>
struct AttnDecBlockT {
  MhaParamsT<T> self_att;
  TensorT<T> ln1_scale, ln1_offset;
  MhaParamsT<T> cross_att;
  TensorT<T> lnc_scale, lnc_offset;
  FfParamsT<T> ff;
  TensorT<T> ln2_scale, ln2_offset;
};

template <class T, class F>
void visit_params(MhaParamsT<T>& p, F&& f, const std::string& prefix) {
  for (size_t h = 0; h < p.wq.size(); ++h) {
    const std::string hp = prefix + "h" + std::to_string(h) + ".";
    f(hp + "wq", p.wq[h]);
    f(hp + "wk", p.wk[h]);
    f(hp + "wv", p.wv[h]);
    f(hp + "wo", p.wo[h]);
  }
  f(prefix + "b_out", p.b_out);
}

template <class T, class F>
void visit_params(FfParamsT<T>& p, F&& f, const std::string& prefix) {
  f(prefix + "w1", p.w1);
  f(prefix + "b1", p.b1);
  f(prefix + "w2", p.w2);
  f(prefix + "b2", p.b2);
}

template <class T, class F>
void visit_params(AttnEncBlockT<T>& p, F&& f, const std::string& prefix = "") {
  visit_params(p.att, f, prefix + "att.");
  f(prefix + "ln1_scale", p.ln1_scale);
  f(prefix + "ln1_offset", p.ln1_offset);
  visit_params(p.ff, f, prefix + "ff.");
  f(prefix + "ln2_scale", p.ln2_scale);
  f(prefix + "ln2_offset", p.ln2_offset);
}

template <class T, class F>
void visit_params(AttnDecBlockT<T>& p, F&& f, const std::string& prefix = "") {
  visit_params(p.self_att, f, prefix + "self.");
  f(prefix + "ln1_scale", p.ln1_scale);
  f(prefix + "ln1_offset", p.ln1_offset);
  visit_params(p.cross_att, f, prefix + "cross.");
  f(prefix + "lnc_scale", p.lnc_scale);
  f(prefix + "lnc_offset", p.lnc_offset);
  visit_params(p.ff, f, prefix + "ff.");
  f(prefix + "ln2_scale", p.ln2_scale);
  f(prefix + "ln2_offset", p.ln2_offset);
}

inline MhaParamsT<double> init_mha(Rng& rng, int d_model, int n_heads) {
  const int dk = d_model / n_heads;
  const double bw = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double bo = 1.0 / std::sqrt(static_cast<double>(dk));
  MhaParamsT<double> p;
  for (int h = 0; h < n_heads; ++h) {
    p.wq.push_back(rand_uniform<double>(rng, {d_model, dk}, -bw, bw));
    p.wk.push_back(rand_uniform<double>(rng, {d_model, dk}, -bw, bw));
    p.wv.push_back(rand_uniform<double>(rng, {d_model, dk}, -bw, bw));
    p.wo.push_back(rand_uniform<double>(rng, {dk, d_model}, -bo, bo));
  }
  p.b_out = Tensor::zeros({d_model});
  return p;
}

inline FfParamsT<double> init_ff(Rng& rng, int d_model) {
  const int hidden = 4 * d_model;
  FfParamsT<double> p;
  p.w1 = rand_uniform<double>(rng, {d_model, hidden}, -1.0 / std::sqrt(1.0 * d_model),
                              1.0 / std::sqrt(1.0 * d_model));
  p.b1 = Tensor::zeros({hidden});
  p.w2 = rand_uniform<double>(rng, {hidden, d_model}, -1.0 / std::sqrt(1.0 * hidden),
                              1.0 / std::sqrt(1.0 * hidden));
  p.b2 = Tensor::zeros({d_model});
  return p;
}

// ---------------------------------------------------------------------------
// Tape forwards
// ---------------------------------------------------------------------------
inline Ref mha_tape(Tape& t, Binder& bind, const MhaParamsT<double>& p, Ref q_src, Ref kv_src,
                    bool causal) {
  Ref out{-1};
  for (int h = 0; h < p.heads(); ++h) {
    Ref q = t.matmul(q_src, bind(p.wq[h]));
    Ref k = t.matmul(kv_src, bind(p.wk[h]));
    Ref v = t.matmul(kv_src, bind(p.wv[h]));
    Ref head = t.matmul(attention_tape(t, q, k, v, causal), bind(p.wo[h]));
    out = h == 0 ? head : t.add(out, head);
  }
  return t.add_bias(out, bind(p.b_out));
}

inline Ref ff_tape(Tape& t, Binder& bind, const FfParamsT<double>& p, Ref x) {
  Ref h = t.gelu(t.add_bias(t.matmul(x, bind(p.w1)), bind(p.b1)));
  return t.add_bias(t.matmul(h, bind(p.w2)), bind(p.b2));
}

inline Ref attn_enc_block_tape(Tape& t, Binder& bind, const AttnEncBlockT<double>& p, Ref x) {
  Ref z = t.layer_norm(x, bind(p.ln1_scale), bind(p.ln1_offset));
  Ref h = t.add(x, mha_tape(t, bind, p.att, z, z, false));
  Ref z2 = t.layer_norm(h, bind(p.ln2_scale), bind(p.ln2_offset));
  return t.add(h, ff_tape(t, bind, p.ff, z2));
}

// repr supplies the cross-attention queries; keys/values come from the
// (normed) action stream. Both attentions are causal over positions.
inline Ref attn_dec_block_tape(Tape& t, Binder& bind, const AttnDecBlockT<double>& p, Ref x,
                               Ref repr) {
  Ref z = t.layer_norm(x, bind(p.ln1_scale), bind(p.ln1_offset));
  Ref h = t.add(x, mha_tape(t, bind, p.self_att, z, z, true));
  Ref zc = t.layer_norm(h, bind(p.lnc_scale), bind(p.lnc_offset));
  Ref h2 = t.add(h, mha_tape(t, bind, p.cross_att, repr, zc, true));
  Ref z2 = t.layer_norm(h2, bind(p.ln2_scale), bind(p.ln2_offset));
  return t.add(h2, ff_tape(t, bind, p.ff, z2));
}

// ---------------------------------------------------------------------------
// Plain forwards
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> mha_plain(const MhaParamsT<T>& p, const TensorT<T>& q_src, const TensorT<T>& kv_src,
                     bool causal) {
  TensorT<T> out;
  for (int h = 0; h < p.heads(); ++h) {
    TensorT<T> head = attention(matmul(q_src, p.wq[h]), matmul(kv_src, p.wk[h]),
                                matmul(kv_src, p.wv[h]), causal);
    TensorT<T> mixed = matmul(head, p.wo[h]);
    if (h == 0)
      out = std::move(mixed);
    else
      for (long long i = 0; i < out.numel(); ++i) out[i] += mixed[i];
  }
  for (int i = 0; i < out.shape[0]; ++i)
    for (int j = 0; j < out.shape[1]; ++j) out.at(i, j) += p.b_out[j];
  return out;
}

template <class T>
TensorT<T> ff_plain(const FfParamsT<T>& p, const TensorT<T>& x) {
  TensorT<T> h = linear(x, p.w1, p.b1);
  for (auto& v : h.data) v = static_cast<T>(gelu_s(static_cast<double>(v)));
  return linear(h, p.w2, p.b2);
}

template <class T>
TensorT<T> attn_enc_block_plain(const AttnEncBlockT<T>& p, const TensorT<T>& x) {
  TensorT<T> z = layer_norm(x, p.ln1_scale, p.ln1_offset);
  TensorT<T> h = mha_plain(p.att, z, z, false);
  for (long long i = 0; i < h.numel(); ++i) h[i] += x[i];
  TensorT<T> z2 = layer_norm(h, p.ln2_scale, p.ln2_offset);
  TensorT<T> f = ff_plain(p.ff, z2);
  for (long long i = 0; i < f.numel(); ++i) f[i] += h[i];
  return f;
}

template <class T>
TensorT<T> attn_dec_block_plain(const AttnDecBlockT<T>& p, const TensorT<T>& x,
                                const TensorT<T>& repr) {
  TensorT<T> z = layer_norm(x, p.ln1_scale, p.ln1_offset);
  TensorT<T> h = mha_plain(p.self_att, z, z, true);
  for (long long i = 0; i < h.numel(); ++i) h[i] += x[i];
  TensorT<T> zc = layer_norm(h, p.lnc_scale, p.lnc_offset);
  // queries for the first h.rows() positions of the representation
  TensorT<T> q({h.shape[0], repr.shape[1]});
  std::copy(repr.data.begin(), repr.data.begin() + q.numel(), q.data.begin());
  TensorT<T> h2 = mha_plain(p.cross_att, q, zc, true);
  for (long long i = 0; i < h2.numel(); ++i) h2[i] += h[i];
  TensorT<T> z2 = layer_norm(h2, p.ln2_scale, p.ln2_offset);
  TensorT<T> f = ff_plain(p.ff, z2);
  for (long long i = 0; i < f.numel(); ++i) f[i] += h2[i];
  return f;
}

// ---------------------------------------------------------------------------
// Full attention backbone (encoder-decoder policy/value model)
// ---------------------------------------------------------------------------
template <class T>
struct MatParamsT {
  TensorT<T> obs_w, obs_b;  // [obs_in, D], [D]
  TensorT<T> act_table;     // [n_actions + 1, D]; last row is the start token
  std::vector<AttnEncBlockT<T>> enc;
  TensorT<T> vhead_w, vhead_b;  // [D, 1], [1]
  std::vector<AttnDecBlockT<T>> dec;
  TensorT<T> phead_w, phead_b;  // [D, n_actions]
};
using MatParams = MatParamsT<double>;

template <class T, class F>
void visit_params(MatParamsT<T>& p, F&& f) {
  f("obs_w", p.obs_w);
  f("obs_b", p.obs_b);
  f("act_table", p.act_table);
  for (size_t i = 0; i < p.enc.size(); ++i)
    visit_params(p.enc[i], f, "enc" + std::to_string(i) + ".");
  f("vhead_w", p.vhead_w);
  f("vhead_b", p.vhead_b);
  for (size_t i = 0; i < p.dec.size(); ++i)
    visit_params(p.dec[i], f, "dec" + std::to_string(i) + ".");
  f("phead_w", p.phead_w);
  f("phead_b", p.phead_b);
}

inline MatParams init_mat_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.d_model, in = cfg.input_dim();
  auto fan_in = [&](int rows, int cols) {
    const double b = 1.0 / std::sqrt(static_cast<double>(rows));
    return rand_uniform<double>(rng, {rows, cols}, -b, b);
  };
  MatParams p;
  p.obs_w = fan_in(in, d);
  p.obs_b = Tensor::zeros({d});
  p.act_table = rand_normal<double>(rng, {cfg.n_actions + 1, d}, 0.02);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    AttnEncBlockT<double> b;
    b.att = init_mha(rng, d, cfg.n_heads);
    b.ln1_scale = Tensor::ones({d});
    b.ln1_offset = Tensor::zeros({d});
    b.ff = init_ff(rng, d);
    b.ln2_scale = Tensor::ones({d});
    b.ln2_offset = Tensor::zeros({d});
    p.enc.push_back(std::move(b));
  }
  p.vhead_w = fan_in(d, 1);
  p.vhead_b = Tensor::zeros({1});
  for (int i = 0; i < cfg.n_blocks; ++i) {
    AttnDecBlockT<double> b;
    b.self_att = init_mha(rng, d, cfg.n_heads);
    b.ln1_scale = Tensor::ones({d});
    b.ln1_offset = Tensor::zeros({d});
    b.cross_att = init_mha(rng, d, cfg.n_heads);
    b.lnc_scale = Tensor::ones({d});
    b.lnc_offset = Tensor::zeros({d});
    b.ff = init_ff(rng, d);
    b.ln2_scale = Tensor::ones({d});
    b.ln2_offset = Tensor::zeros({d});
    p.dec.push_back(std::move(b));
  }
  p.phead_w = fan_in(d, cfg.n_actions);
  p.phead_b = Tensor::zeros({cfg.n_actions});
  return p;
}

// Token ids for teacher-forced decoding: start token, then all actions but
// the last. Position i then predicts agent i's action.
inline std::vector<int> shifted_action_ids(const std::vector<int>& actions, int start_token,
                                           int n_actions) {
  std::vector<int> ids(actions.size());
  ids[0] = start_token;
  for (size_t i = 0; i + 1 < actions.size(); ++i) {
    check(actions[i] >= 0 && actions[i] < n_actions, "decode: action id out of range");
    ids[i + 1] = actions[i];
  }
  if (!actions.empty())
    check(actions.back() >= 0 && actions.back() < n_actions, "decode: action id out of range");
  return ids;
}

struct TapeEncodeOut {
  Ref repr;    // [n, D]
  Ref values;  // [n]
};

// Norms live inside the residual blocks only; with zeroed attention and FF
// weights the representation is exactly the observation embedding.
inline TapeEncodeOut mat_encode_tape(Tape& t, Binder& bind, const MatParams& p, const Tensor& obs) {
  Ref x = t.gelu(t.add_bias(t.matmul(t.constant(obs), bind(p.obs_w)), bind(p.obs_b)));
  for (const auto& b : p.enc) x = attn_enc_block_tape(t, bind, b, x);
  Ref values = t.reshape(t.add_bias(t.matmul(x, bind(p.vhead_w)), bind(p.vhead_b)),
                         {t.val(x).shape[0]});
  return {x, values};
}

inline Ref mat_decode_parallel_tape(Tape& t, Binder& bind, const MatParams& p, Ref repr,
                                    const std::vector<int>& actions, const ModelConfig& cfg) {
  check(static_cast<int>(actions.size()) == t.val(repr).shape[0],
        "decode: one action per agent token");
  std::vector<int> ids = shifted_action_ids(actions, cfg.start_token(), cfg.n_actions);
  Ref x = t.gather_rows(bind(p.act_table), ids);
  for (const auto& b : p.dec) x = attn_dec_block_tape(t, bind, b, x, repr);
  return t.add_bias(t.matmul(x, bind(p.phead_w)), bind(p.phead_b));
}

template <class T>
struct PlainEncodeOut {
  TensorT<T> repr;
  TensorT<T> values;  // [n]
};

template <class T>
PlainEncodeOut<T> mat_encode_plain(const MatParamsT<T>& p, const TensorT<T>& obs) {
  TensorT<T> x = linear(obs, p.obs_w, p.obs_b);
  for (auto& v : x.data) v = static_cast<T>(gelu_s(static_cast<double>(v)));
  for (const auto& b : p.enc) x = attn_enc_block_plain(b, x);
  TensorT<T> v2 = linear(x, p.vhead_w, p.vhead_b);
  TensorT<T> values({x.shape[0]});
  for (int i = 0; i < x.shape[0]; ++i) values[i] = v2.at(i, 0);
  return {std::move(x), std::move(values)};
}

template <class T>
TensorT<T> mat_decode_parallel_plain(const MatParamsT<T>& p, const TensorT<T>& repr,
                                     const std::vector<int>& actions, const ModelConfig& cfg) {
  std::vector<int> ids = shifted_action_ids(actions, cfg.start_token(), cfg.n_actions);
  TensorT<T> x({static_cast<int>(ids.size()), p.act_table.shape[1]});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(&p.act_table.at(ids[i], 0), &p.act_table.at(ids[i], 0) + p.act_table.shape[1],
              &x.at(static_cast<int>(i), 0));
  for (const auto& b : p.dec) x = attn_dec_block_plain(b, x, repr);
  return linear(x, p.phead_w, p.phead_b);
}

// Autoregressive decode without any cached state: every agent step rebuilds
// the whole action prefix through the decoder stack.
template <class T>
std::vector<int> mat_decode_autoregressive(const MatParamsT<T>& p, const TensorT<T>& repr,
                                           const ModelConfig& cfg, Rng* rng,
                                           TensorT<T>* logits_out = nullptr) {
  const int n = repr.shape[0];
  std::vector<int> actions;
  if (logits_out) *logits_out = TensorT<T>({n, cfg.n_actions});
  for (int i = 0; i < n; ++i) {
    std::vector<int> prefix = actions;
    prefix.push_back(0);  // placeholder; shifted ids only read prefix[0..i-1]
    TensorT<T> logits = mat_decode_parallel_plain(p, repr, prefix, cfg);
    const int a = sample_logits_row(logits, i, rng);
    if (logits_out)
      for (int j = 0; j < cfg.n_actions; ++j) logits_out->at(i, j) = logits.at(i, j);
    actions.push_back(a);
  }
  return actions;
}

}  // namespace mam
