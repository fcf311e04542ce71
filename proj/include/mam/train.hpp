#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "mam/checkpoint.hpp"
#include "mam/config.hpp"

namespace mam {

// Adam over the flat parameter enumeration; gradients are pre-scaled by one
// global-norm clip factor before the moment updates see them.
class Adam {
 public:
  Adam(const ParamIndex& ix, double lr) : lr_(lr) {
    for (const Tensor* t : ix.tensors) {
      m_.push_back(Tensor::zeros(t->shape));
      v_.push_back(Tensor::zeros(t->shape));
    }
  }

  double step(ParamIndex& ix, const std::unordered_map<int, Tensor>& grads,
              double max_grad_norm) {
    double sq = 0;
    for (const auto& [pid, g] : grads)
      for (long long i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
    const double norm = std::sqrt(sq);
    const double scale = norm > max_grad_norm ? max_grad_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [pid, g] : grads) {
      Tensor& p = *ix.tensors[pid];
      Tensor& m = m_[pid];
      Tensor& v = v_[pid];
      for (long long i = 0; i < g.numel(); ++i) {
        const double gi = g[i] * scale;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
    return norm;
  }

 private:
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct UpdateStats {
  double loss = 0;
  double value_loss = 0;
  double entropy = 0;
  double clip_frac = 0;
  double approx_kl = 0;
  double grad_norm = 0;
};

// One PPO update over a collected batch: epochs x minibatches of timesteps,
// each minibatch a fresh tape through encode + parallel decode.
inline UpdateStats ppo_update(Policy& policy, ParamIndex& ix, Adam& adam,
                              const RolloutBatch& batch, const TrainConfig& tc, Rng& rng) {
  const int tlen = batch.length(), n = batch.agents();
  UpdateStats stats;
  std::vector<int> order(tlen);
  std::iota(order.begin(), order.end(), 0);
  const int chunk = (tlen + tc.minibatches - 1) / tc.minibatches;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int i = tlen; i > 1; --i) std::swap(order[i - 1], order[rng.randint(i)]);
    for (int mb = 0; mb < tc.minibatches; ++mb) {
      const int lo = mb * chunk, hi = std::min(tlen, lo + chunk);
      if (lo >= hi) continue;
      Tape t;
      Binder bind(t, ix.pid_of);
      Ref new_logp{-1}, values_pred{-1}, entropy{-1};
      Tensor old_logp({(hi - lo) * n}), adv({(hi - lo) * n}), ret({(hi - lo) * n});
      for (int s = lo; s < hi; ++s) {
        const int ts = order[s];
        Tensor obs_t({n, batch.obs.shape[2]});
        std::copy(&batch.obs.at3(ts, 0, 0), &batch.obs.at3(ts, 0, 0) + obs_t.numel(),
                  obs_t.data.begin());
        TapeEncodeOut enc = policy_encode_tape(t, bind, policy, obs_t);
        Ref logits = policy_decode_parallel_tape(t, bind, policy, enc.repr, batch.actions[ts]);
        Ref logp_rows = t.log_softmax_rows(logits);
        Ref lp = t.take_per_row(logp_rows, batch.actions[ts]);
        Ref ent = t.scale(t.row_sum(t.mul(t.softmax_rows(logits, false), logp_rows)), -1.0);
        new_logp = s == lo ? lp : t.concat_rows(new_logp, lp);
        values_pred = s == lo ? enc.values : t.concat_rows(values_pred, enc.values);
        entropy = s == lo ? ent : t.concat_rows(entropy, ent);
        for (int i = 0; i < n; ++i) {
          const int flat = (s - lo) * n + i;
          old_logp[flat] = batch.old_logp.at(ts, i);
          adv[flat] = batch.advantages.at(ts, i);
          ret[flat] = batch.returns.at(ts, i);
        }
      }
      MappoDiagnostics diag;
      Ref loss = mappo_loss(t, new_logp, old_logp, adv, values_pred, ret, entropy, tc, &diag);
      const double loss_val = t.val(loss)[0];
      if (!std::isfinite(loss_val)) throw std::runtime_error("mappo_loss: non-finite total loss");
      t.backward(loss);
      stats.grad_norm = adam.step(ix, t.param_grads(), tc.max_grad_norm);
      stats.loss = loss_val;
      stats.clip_frac = diag.clip_frac;
      stats.approx_kl = diag.approx_kl;
      const Tensor& vp = t.val(values_pred);
      const Tensor& en = t.val(entropy);
      double vl = 0, es = 0;
      for (long long i = 0; i < vp.numel(); ++i) {
        vl += (vp[i] - ret[i]) * (vp[i] - ret[i]);
        es += en[i];
      }
      stats.value_loss = vl / vp.numel();
      stats.entropy = es / vp.numel();
    }
  }
  return stats;
}

struct EvalStats {
  double mean = 0;
  double ci95 = 0;
};

// Greedy policy evaluation over fresh episodes; the EnvConfig spawns a
// dedicated instance so training episode state is untouched.
inline EvalStats evaluate_policy(const Policy& policy, const EnvConfig& env_cfg, int episodes,
                                 uint64_t seed_base) {
  auto env = make_env(env_cfg);
  std::vector<int> identity(env->n_agents());
  std::iota(identity.begin(), identity.end(), 0);
  std::vector<double> returns;
  for (int e = 0; e < episodes; ++e) {
    Tensor obs = env->reset(seed_base + static_cast<uint64_t>(e));
    double total = 0;
    while (true) {
      auto enc = policy_encode(policy, policy_input(obs, identity, policy.cfg));
      std::vector<int> acts = policy_decode_ar(policy, enc.repr, nullptr);
      StepResult r = env->step(acts);
      total += r.reward;
      if (r.done) break;
      obs = r.obs;
    }
    returns.push_back(total);
  }
  EvalStats s;
  for (double r : returns) s.mean += r;
  s.mean /= returns.size();
  double var = 0;
  for (double r : returns) var += (r - s.mean) * (r - s.mean);
  var = returns.size() > 1 ? var / (returns.size() - 1) : 0.0;
  s.ci95 = 1.96 * std::sqrt(var / returns.size());
  return s;
}

struct TrainResult {
  double final_eval_mean = 0;
  double final_eval_ci95 = 0;
  bool aborted = false;
  std::string metrics_path;
  std::string checkpoint_path;
};

inline constexpr const char* kMetricsSchema = "train_metrics_v1";

// Full training run: collect, update, periodically evaluate, write one
// metrics row per evaluation, save the final checkpoint. A non-finite loss
// aborts the run and dumps the last parameters that produced finite losses.
inline TrainResult run_train(const RunConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  const std::string tag =
      std::string(model_kind_name(cfg.model.kind)) + "_seed" + std::to_string(seed);
  TrainResult result;
  result.metrics_path = cfg.out_dir + "/metrics_" + tag + ".csv";
  result.checkpoint_path = cfg.out_dir + "/checkpoint_" + tag + ".bin";

  auto env = make_env(cfg.env);
  Policy policy = init_policy(cfg.model, seed);
  ParamIndex ix = index_params(policy);
  Adam adam(ix, cfg.train.lr);
  RolloutCollector collector(*env, seed ^ 0x9e3779b97f4a7c15ull);
  Rng shuffle_rng(seed ^ 0x6a09e667f3bcc909ull);

  std::ofstream csv(result.metrics_path);
  if (!csv) throw std::runtime_error("train: cannot write " + result.metrics_path);
  csv << "# schema=" << kMetricsSchema << "\n";
  csv << "update,env_steps,eval_return_mean,eval_return_ci95,loss,value_loss,entropy,clip_frac,"
         "approx_kl,wall_clock_s\n";
  const auto t0 = std::chrono::steady_clock::now();

  Policy last_good = policy;
  UpdateStats stats;
  for (int update = 1; update <= cfg.total_updates; ++update) {
    try {
      RolloutBatch batch = collector.collect(policy, cfg.train);
      stats = ppo_update(policy, ix, adam, batch, cfg.train, shuffle_rng);
    } catch (const std::runtime_error& e) {
      save_checkpoint(last_good, result.checkpoint_path);
      csv << "# aborted at update " << update << ": " << e.what() << "\n";
      result.aborted = true;
      return result;
    }
    last_good = policy;
    if (update % cfg.eval_interval == 0 || update == cfg.total_updates) {
      EvalStats ev = evaluate_policy(policy, cfg.env, cfg.eval_episodes, 0xe7a1);
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      csv << update << ',' << update * cfg.train.rollout_length << ',' << std::setprecision(17)
          << ev.mean << ',' << ev.ci95 << ',' << stats.loss << ',' << stats.value_loss << ','
          << stats.entropy << ',' << stats.clip_frac << ',' << stats.approx_kl << ','
          << std::setprecision(6) << wall << "\n";
      result.final_eval_mean = ev.mean;
      result.final_eval_ci95 = ev.ci95;
    }
  }
  save_checkpoint(policy, result.checkpoint_path);
  return result;
}

}  // namespace mam
