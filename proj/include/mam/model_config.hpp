#pragma once

#include <string>

#include "mam/ssm.hpp"
#include "mam/tensor.hpp"

namespace mam {

enum class ModelKind : uint8_t { Mam, Attention };

inline ModelKind model_kind_from_name(const std::string& name) {
  if (name == "mam") return ModelKind::Mam;
  if (name == "attention") return ModelKind::Attention;
  throw std::invalid_argument("model.kind: unknown model '" + name + "'");
}
inline const char* model_kind_name(ModelKind k) {
  return k == ModelKind::Mam ? "mam" : "attention";
}

struct ModelConfig {
  ModelKind kind = ModelKind::Mam;
  int d_model = 64;
  int n_state = 16;    // scan state width per channel
  int dt_rank = 16;    // low-rank width of the step-size projection
  int conv_width = 4;
  int n_blocks = 1;    // encoder depth; decoder uses the same count of pairs
  int n_heads = 1;     // attention baseline only
  int n_agents = 2;
  int obs_dim = 4;
  int n_actions = 2;
  bool add_agent_id = true;
  Discretization disc = Discretization::Euler;

  int input_dim() const { return obs_dim + (add_agent_id ? n_agents : 0); }
  int start_token() const { return n_actions; }

  void validate() const {
    auto pos = [](int v, const char* name) {
      check(v > 0, std::string("model.") + name + ": must be positive, got " + std::to_string(v));
    };
    pos(d_model, "d_model");
    pos(n_state, "state_dim");
    pos(dt_rank, "dt_rank");
    pos(conv_width, "conv_width");
    pos(n_blocks, "blocks");
    pos(n_heads, "heads");
    pos(n_agents, "agents");
    pos(obs_dim, "obs_dim");
    pos(n_actions, "actions");
    check(d_model % n_heads == 0, "model.heads: must divide d_model");
  }
};

// Softmax-samples an action from one row of a logits matrix; a null rng
// means greedy argmax. Ties break toward the lower index.
template <class T>
int sample_logits_row(const TensorT<T>& logits, int row, Rng* rng) {
  const int c = logits.shape[1];
  if (!rng) return argmax_row(logits, row);
  double mx = static_cast<double>(logits.at(row, 0));
  for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(logits.at(row, j)));
  double z = 0;
  for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(logits.at(row, j)) - mx);
  double u = rng->uniform() * z;
  for (int j = 0; j < c; ++j) {
    u -= std::exp(static_cast<double>(logits.at(row, j)) - mx);
    if (u <= 0) return j;
  }
  return c - 1;
}

// log softmax(logits_row)[j], the action log-probability used by rollouts.
template <class T>
double logp_row(const TensorT<T>& logits, int row, int j) {
  const int c = logits.shape[1];
  double mx = static_cast<double>(logits.at(row, 0));
  for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(logits.at(row, k)));
  double z = 0;
  for (int k = 0; k < c; ++k) z += std::exp(static_cast<double>(logits.at(row, k)) - mx);
  return static_cast<double>(logits.at(row, j)) - mx - std::log(z);
}

}  // namespace mam
