#pragma once

#include <numeric>

#include "mam/env.hpp"
#include "mam/model.hpp"

namespace mam {

struct TrainConfig {
  double gamma = 0.99;
  double lam = 0.9;
  double clip_eps = 0.1;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  int rollout_length = 128;
  int epochs = 10;
  int minibatches = 2;
  double lr = 5e-4;
  double max_grad_norm = 0.5;
  bool permute_agents = false;

  void validate() const {
    check(gamma >= 0.0 && gamma < 1.0, "train.gamma: must be in [0,1)");
    check(lam >= 0.0 && lam <= 1.0, "train.lam: must be in [0,1]");
    check(clip_eps > 0.0, "train.clip_eps: must be positive");
    check(entropy_coef >= 0.0, "train.entropy_coef: must be non-negative");
    check(value_coef >= 0.0, "train.value_coef: must be non-negative");
    check(rollout_length > 0, "train.rollout_length: must be positive");
    check(epochs > 0, "train.epochs: must be positive");
    check(minibatches > 0 && minibatches <= rollout_length,
          "train.minibatches: must be in [1, rollout_length]");
    check(lr > 0.0, "train.lr: must be positive");
    check(max_grad_norm > 0.0, "train.max_grad_norm: must be positive");
  }
};

// One on-policy batch. Observations are stored exactly as the model saw them
// (agent IDs appended, agent order already permuted when that mode is on);
// actions and per-agent statistics follow the same model-position order.
struct RolloutBatch {
  Tensor obs;                             // [T, n, input_dim]
  std::vector<std::vector<int>> actions;  // [T][n]
  std::vector<double> rewards;            // [T], shared
  Tensor values;                          // [T, n]
  Tensor old_logp;                        // [T, n]
  Tensor advantages;                      // [T, n]
  Tensor returns;                         // [T, n]
  std::vector<uint8_t> dones;             // [T]
  std::vector<std::vector<int>> perms;    // [T][n]; model position p holds env agent perms[p]

  int length() const { return static_cast<int>(rewards.size()); }
  int agents() const { return obs.shape[1]; }
};

// delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t
// A_t = delta_t + gamma*lambda*(1-done_t)*A_{t+1};  returns = A + V
inline void gae(const std::vector<double>& rewards, const Tensor& values,
                const std::vector<double>& bootstrap, double gamma, double lam,
                const std::vector<uint8_t>& dones, Tensor* advantages, Tensor* returns) {
  const int tlen = static_cast<int>(rewards.size());
  check(values.shape.size() == 2 && values.shape[0] == tlen, "gae: values must be [T, n]");
  const int n = values.shape[1];
  check(static_cast<int>(bootstrap.size()) == n, "gae: one bootstrap value per agent");
  check(static_cast<int>(dones.size()) == tlen, "gae: one done flag per step");
  *advantages = Tensor::zeros({tlen, n});
  *returns = Tensor::zeros({tlen, n});
  for (int i = 0; i < n; ++i) {
    double acc = 0;
    for (int t = tlen - 1; t >= 0; --t) {
      const double cont = dones[t] ? 0.0 : 1.0;
      const double v_next = t + 1 < tlen ? values.at(t + 1, i) : bootstrap[i];
      const double delta = rewards[t] + gamma * v_next * cont - values.at(t, i);
      acc = delta + gamma * lam * cont * acc;
      advantages->at(t, i) = acc;
      returns->at(t, i) = acc + values.at(t, i);
    }
  }
}

struct MappoDiagnostics {
  double clip_frac = 0;
  double approx_kl = 0;
};

namespace detail {
inline void require_finite(const Tensor& x, const char* name) {
  for (long long i = 0; i < x.numel(); ++i)
    if (!std::isfinite(x[i]))
      throw std::runtime_error(std::string("mappo_loss: non-finite value in ") + name);
}
}  // namespace detail

// Clipped-ratio policy loss plus value and entropy terms. All refs and
// tensors share one flat shape over (t, agent) pairs.
inline Ref mappo_loss(Tape& t, Ref new_logp, const Tensor& old_logp, const Tensor& advantages,
                      Ref values_pred, const Tensor& returns, Ref entropy, const TrainConfig& cfg,
                      MappoDiagnostics* diag = nullptr) {
  const Tensor& nl = t.val(new_logp);
  check(nl.shape == old_logp.shape && nl.shape == advantages.shape,
        "mappo_loss: policy inputs must share one shape");
  check(t.val(values_pred).shape == returns.shape, "mappo_loss: value inputs must share one shape");
  detail::require_finite(nl, "new_logp");
  detail::require_finite(old_logp, "old_logp");
  detail::require_finite(advantages, "advantages");
  detail::require_finite(t.val(values_pred), "values_pred");
  detail::require_finite(returns, "returns");
  detail::require_finite(t.val(entropy), "entropy");

  Ref ratio = t.pointwise(Act::Exp, t.sub(new_logp, t.constant(old_logp)));
  Ref adv = t.constant(advantages);
  Ref surrogate = t.minimum(t.mul(ratio, adv), t.mul(t.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv));
  Ref policy = t.scale(t.mean(surrogate), -1.0);
  Ref verr = t.sub(values_pred, t.constant(returns));
  Ref vloss = t.scale(t.mean(t.mul(verr, verr)), cfg.value_coef);
  Ref loss = t.add(policy, t.sub(vloss, t.scale(t.mean(entropy), cfg.entropy_coef)));

  if (diag) {
    // re-fetch: node storage may have moved while the graph grew
    const Tensor& r = t.val(ratio);
    const Tensor& nl2 = t.val(new_logp);
    double clipped = 0, kl = 0;
    for (long long i = 0; i < r.numel(); ++i) {
      clipped += std::abs(r[i] - 1.0) > cfg.clip_eps ? 1.0 : 0.0;
      kl += old_logp[i] - nl2[i];
    }
    diag->clip_frac = clipped / r.numel();
    diag->approx_kl = kl / r.numel();
  }
  return loss;
}

// Appends a one-hot of each env agent's identity so the policy knows which
// position decides for which agent, permutation mode included.
inline Tensor policy_input(const Tensor& env_obs, const std::vector<int>& perm,
                           const ModelConfig& cfg) {
  const int n = env_obs.shape[0], d = env_obs.shape[1];
  check(d == cfg.obs_dim, "rollout: env observation width differs from model.obs_dim");
  check(static_cast<int>(perm.size()) == n, "rollout: permutation size mismatch");
  Tensor x = Tensor::zeros({n, cfg.input_dim()});
  for (int p = 0; p < n; ++p) {
    const int agent = perm[p];
    for (int e = 0; e < d; ++e) x.at(p, e) = env_obs.at(agent, e);
    if (cfg.add_agent_id) x.at(p, d + agent) = 1.0;
  }
  return x;
}

// Steps one environment under the current policy, keeping episode state
// between batches. Sampling, env reseeding, and the optional per-episode
// agent permutation all draw from one generator, so a (seed, config) pair
// fixes the batch exactly.
class RolloutCollector {
 public:
  RolloutCollector(MarkovGame& env, uint64_t seed) : env_(env), rng_(seed) {
    begin_episode();
  }

  RolloutBatch collect(const Policy& policy, const TrainConfig& tc) {
    const int tlen = tc.rollout_length, n = env_.n_agents();
    check(n == policy.cfg.n_agents, "rollout: env and model agent counts differ");
    RolloutBatch b;
    b.obs = Tensor::zeros({tlen, n, policy.cfg.input_dim()});
    b.values = Tensor::zeros({tlen, n});
    b.old_logp = Tensor::zeros({tlen, n});
    b.rewards.resize(tlen);
    b.dones.resize(tlen);
    for (int t = 0; t < tlen; ++t) {
      if (tc.permute_agents != permuting_) {
        permuting_ = tc.permute_agents;
        draw_perm();
      }
      Tensor x = policy_input(obs_, perm_, policy.cfg);
      std::copy(x.data.begin(), x.data.end(), &b.obs.at3(t, 0, 0));
      auto enc = policy_encode(policy, x);
      Tensor logits;
      std::vector<int> acts = policy_decode_ar(policy, enc.repr, &rng_, &logits);
      std::vector<int> env_acts(n);
      for (int p = 0; p < n; ++p) {
        b.values.at(t, p) = enc.values[p];
        b.old_logp.at(t, p) = logp_row(logits, p, acts[p]);
        env_acts[perm_[p]] = acts[p];
      }
      b.actions.push_back(acts);
      b.perms.push_back(perm_);
      StepResult sr = env_.step(env_acts);
      b.rewards[t] = sr.reward;
      b.dones[t] = sr.done ? 1 : 0;
      episode_return_ += sr.reward;
      if (sr.done) {
        finished_returns_.push_back(episode_return_);
        begin_episode();
      } else {
        obs_ = sr.obs;
      }
    }
    std::vector<double> boot(n);
    auto enc = policy_encode(policy, policy_input(obs_, perm_, policy.cfg));
    for (int p = 0; p < n; ++p) boot[p] = enc.values[p];
    gae(b.rewards, b.values, boot, tc.gamma, tc.lam, b.dones, &b.advantages, &b.returns);
    return b;
  }

  // episode returns completed since the last call
  std::vector<double> drain_finished_returns() {
    std::vector<double> out;
    out.swap(finished_returns_);
    return out;
  }

 private:
  void begin_episode() {
    obs_ = env_.reset(rng_.next_u64());
    episode_return_ = 0;
    draw_perm();
  }

  void draw_perm() {
    const int n = env_.n_agents();
    perm_.resize(n);
    std::iota(perm_.begin(), perm_.end(), 0);
    if (permuting_)
      for (int i = n; i > 1; --i) std::swap(perm_[i - 1], perm_[rng_.randint(i)]);
  }

  MarkovGame& env_;
  Rng rng_;
  Tensor obs_;
  std::vector<int> perm_;
  bool permuting_ = false;
  double episode_return_ = 0;
  std::vector<double> finished_returns_;
};

// ---------------------------------------------------------------------------
// Exact tabular evaluation of the per-agent advantage decomposition
// ---------------------------------------------------------------------------
struct TabularGame {
  int n_states = 0, n_agents = 0, n_actions = 0;
  double gamma = 0.95;
  Tensor reward;      // [S, J] with J = n_actions^n_agents
  Tensor transition;  // [S*J, S], rows sum to 1
};

namespace detail {

inline int joint_count(const TabularGame& g) {
  int j = 1;
  for (int i = 0; i < g.n_agents; ++i) j *= g.n_actions;
  return j;
}

inline std::vector<int> decode_joint(int j, int n, int k) {
  std::vector<int> a(n);
  for (int i = n - 1; i >= 0; --i) {
    a[i] = j % k;
    j /= k;
  }
  return a;
}

// dense Gaussian elimination with partial pivoting; S stays tiny here
inline std::vector<double> solve_linear(std::vector<std::vector<double>> m,
                                        std::vector<double> rhs) {
  const int n = static_cast<int>(rhs.size());
  for (int c = 0; c < n; ++c) {
    int piv = c;
    for (int r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    std::swap(m[c], m[piv]);
    std::swap(rhs[c], rhs[piv]);
    check(std::abs(m[c][c]) > 1e-12, "tabular: singular policy-evaluation system");
    for (int r = c + 1; r < n; ++r) {
      const double f = m[r][c] / m[c][c];
      for (int c2 = c; c2 < n; ++c2) m[r][c2] -= f * m[c][c2];
      rhs[r] -= f * rhs[c];
    }
  }
  std::vector<double> x(n);
  for (int r = n - 1; r >= 0; --r) {
    double s = rhs[r];
    for (int c = r + 1; c < n; ++c) s -= m[r][c] * x[c];
    x[r] = s / m[r][r];
  }
  return x;
}

}  // namespace detail

inline TabularGame random_tabular_game(Rng& rng, int n_states, int n_agents, int n_actions,
                                       double gamma) {
  TabularGame g;
  g.n_states = n_states;
  g.n_agents = n_agents;
  g.n_actions = n_actions;
  g.gamma = gamma;
  const int j = detail::joint_count(g);
  g.reward = rand_uniform<double>(rng, {n_states, j}, -1.0, 1.0);
  g.transition = Tensor::zeros({n_states * j, n_states});
  for (int r = 0; r < n_states * j; ++r) {
    double z = 0;
    for (int s = 0; s < n_states; ++s) {
      g.transition.at(r, s) = 0.05 + rng.uniform();
      z += g.transition.at(r, s);
    }
    for (int s = 0; s < n_states; ++s) g.transition.at(r, s) /= z;
  }
  return g;
}

inline Tensor random_tabular_policy(Rng& rng, const TabularGame& g) {
  Tensor pi({g.n_states, g.n_agents, g.n_actions});
  for (int s = 0; s < g.n_states; ++s)
    for (int i = 0; i < g.n_agents; ++i) {
      double z = 0;
      for (int a = 0; a < g.n_actions; ++a) {
        pi.at3(s, i, a) = 0.1 + rng.uniform();
        z += pi.at3(s, i, a);
      }
      for (int a = 0; a < g.n_actions; ++a) pi.at3(s, i, a) /= z;
    }
  return pi;
}

// Max abs residual of the multi-agent advantage decomposition: the joint
// advantage must equal the sum of per-agent advantages conditioned on the
// earlier agents' actions, for the given agent ordering. Evaluation is exact:
// V solves the policy's linear fixed point, Q follows by one backup, and
// partial-prefix values marginalize the remaining agents under the policy.
inline double advantage_decomposition_residual(const TabularGame& g, const Tensor& policy,
                                               const std::vector<int>& perm) {
  check(g.n_states >= 1 && g.n_states <= 20, "tabular: need 1..20 states for exact evaluation");
  check(g.n_agents >= 1 && g.n_agents <= 3, "tabular: need 1..3 agents for exact evaluation");
  check(g.n_actions >= 1 && g.n_actions <= 4, "tabular: need 1..4 actions for exact evaluation");
  check(static_cast<int>(perm.size()) == g.n_agents, "tabular: permutation size mismatch");
  const int S = g.n_states, n = g.n_agents, k = g.n_actions, J = detail::joint_count(g);
  check(policy.shape == Shape({S, n, k}), "tabular: policy must be [S, n_agents, n_actions]");

  std::vector<std::vector<double>> pjoint(S, std::vector<double>(J));
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < J; ++j) {
      const std::vector<int> a = detail::decode_joint(j, n, k);
      double p = 1;
      for (int i = 0; i < n; ++i) p *= policy.at3(s, i, a[i]);
      pjoint[s][j] = p;
    }

  // V = (I - gamma * P_pi)^{-1} r_pi
  std::vector<std::vector<double>> m(S, std::vector<double>(S, 0.0));
  std::vector<double> rhs(S, 0.0);
  for (int s = 0; s < S; ++s) {
    m[s][s] = 1.0;
    for (int j = 0; j < J; ++j) {
      rhs[s] += pjoint[s][j] * g.reward.at(s, j);
      for (int s2 = 0; s2 < S; ++s2)
        m[s][s2] -= g.gamma * pjoint[s][j] * g.transition.at(s * J + j, s2);
    }
  }
  const std::vector<double> v = detail::solve_linear(m, rhs);

  std::vector<std::vector<double>> q(S, std::vector<double>(J));
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < J; ++j) {
      double x = g.reward.at(s, j);
      for (int s2 = 0; s2 < S; ++s2) x += g.gamma * g.transition.at(s * J + j, s2) * v[s2];
      q[s][j] = x;
    }

  // marginal value of fixing the first m agents of the ordering; the rest
  // act under the policy
  auto q_prefix = [&](int s, const std::vector<int>& joint, int fixed) {
    double num = 0;
    for (int j = 0; j < J; ++j) {
      const std::vector<int> a = detail::decode_joint(j, n, k);
      bool match = true;
      for (int i = 0; i < fixed; ++i) match = match && a[perm[i]] == joint[perm[i]];
      if (!match) continue;
      double w = 1;
      for (int i = fixed; i < n; ++i) w *= policy.at3(s, perm[i], a[perm[i]]);
      num += w * q[s][j];
    }
    return num;
  };

  double residual = 0;
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < J; ++j) {
      const std::vector<int> a = detail::decode_joint(j, n, k);
      const double joint_adv = q[s][j] - v[s];
      double sum = 0;
      for (int mfix = 1; mfix <= n; ++mfix)
        sum += q_prefix(s, a, mfix) - q_prefix(s, a, mfix - 1);
      residual = std::max(residual, std::abs(joint_adv - sum));
    }
  return residual;
}

}  // namespace mam
