#pragma once

#include <fstream>
#include <memory>
#include <sstream>

#include "mam/env.hpp"
#include "mam/marl.hpp"
#include "mam/model_config.hpp"

namespace mam {

struct EnvConfig {
  std::string name = "consensus";
  int n_agents = 3;
  int n_actions = 4;  // consensus choices; foraging always has 6 actions
  int horizon = 16;
  int grid = 5;   // foraging only
  int n_food = 2; // foraging only

  void validate() const {
    check(name == "consensus" || name == "foraging", "env.name: must be consensus or foraging");
    check(n_agents > 0, "env.n_agents: must be positive");
    check(n_actions > 0, "env.n_actions: must be positive");
    check(horizon > 0, "env.horizon: must be positive");
    check(grid >= 2, "env.grid: must be at least 2");
    check(n_food > 0, "env.n_food: must be positive");
  }
};

struct BenchConfig {
  std::vector<int> agents = {8, 16, 32, 64, 128, 256};
  int reps = 20;
  int warmup = 3;

  void validate() const {
    check(!agents.empty(), "bench.agents: must list at least one agent count");
    for (int n : agents) check(n > 0, "bench.agents: counts must be positive");
    check(reps > 0, "bench.reps: must be positive");
    check(warmup >= 0, "bench.warmup: must be non-negative");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  int total_updates = 60;
  int eval_interval = 10;
  int eval_episodes = 32;
  EnvConfig env;
  BenchConfig bench;
  std::vector<uint64_t> seeds = {1};
  std::string out_dir = "out";

  void validate() const {
    model.validate();
    train.validate();
    env.validate();
    bench.validate();
    check(total_updates > 0, "train.total_updates: must be positive");
    check(eval_interval > 0, "train.eval_interval: must be positive");
    check(eval_episodes > 0, "train.eval_episodes: must be positive");
    check(!seeds.empty(), "seeds: must list at least one seed");
  }
};

inline std::unique_ptr<MarkovGame> make_env(const EnvConfig& e) {
  e.validate();
  if (e.name == "consensus")
    return std::make_unique<ConsensusGame>(e.n_agents, e.n_actions, e.horizon);
  return std::make_unique<ForagingLite>(e.grid, e.n_agents, e.n_food, e.horizon);
}

// The model's sequence geometry always comes from the environment.
inline void resolve_model_dims(RunConfig& cfg) {
  auto env = make_env(cfg.env);
  cfg.model.n_agents = env->n_agents();
  cfg.model.obs_dim = env->obs_dim();
  cfg.model.n_actions = env->n_actions();
}

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline int to_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  int out = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size()) throw ConfigError("config: " + key + ": expected an integer, got '" + v + "'");
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size()) throw ConfigError("config: " + key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + ": expected true or false, got '" + v + "'");
}

template <class T, class F>
std::vector<T> to_list(const std::string& key, const std::string& v, F&& one) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(one(key, item));
  }
  if (out.empty()) throw ConfigError("config: " + key + ": expected a comma-separated list");
  return out;
}

inline void apply_key(RunConfig& c, const std::string& key, const std::string& v, int line) {
  auto unknown = [&]() {
    throw ConfigError("config: unknown key '" + key + "' (line " + std::to_string(line) + ")");
  };
  if (key == "model.kind") {
    c.model.kind = model_kind_from_name(v);
  } else if (key == "model.d_model") {
    c.model.d_model = to_int(key, v);
  } else if (key == "model.n_state") {
    c.model.n_state = to_int(key, v);
  } else if (key == "model.dt_rank") {
    c.model.dt_rank = to_int(key, v);
  } else if (key == "model.conv_width") {
    c.model.conv_width = to_int(key, v);
  } else if (key == "model.n_blocks") {
    c.model.n_blocks = to_int(key, v);
  } else if (key == "model.n_heads") {
    c.model.n_heads = to_int(key, v);
  } else if (key == "model.add_agent_id") {
    c.model.add_agent_id = to_bool(key, v);
  } else if (key == "model.discretization") {
    c.model.disc = discretization_from_name(v);
  } else if (key == "env.name") {
    c.env.name = v;
  } else if (key == "env.n_agents") {
    c.env.n_agents = to_int(key, v);
  } else if (key == "env.n_actions") {
    c.env.n_actions = to_int(key, v);
  } else if (key == "env.horizon") {
    c.env.horizon = to_int(key, v);
  } else if (key == "env.grid") {
    c.env.grid = to_int(key, v);
  } else if (key == "env.n_food") {
    c.env.n_food = to_int(key, v);
  } else if (key == "train.gamma") {
    c.train.gamma = to_double(key, v);
  } else if (key == "train.lam") {
    c.train.lam = to_double(key, v);
  } else if (key == "train.clip_eps") {
    c.train.clip_eps = to_double(key, v);
  } else if (key == "train.entropy_coef") {
    c.train.entropy_coef = to_double(key, v);
  } else if (key == "train.value_coef") {
    c.train.value_coef = to_double(key, v);
  } else if (key == "train.rollout_length") {
    c.train.rollout_length = to_int(key, v);
  } else if (key == "train.epochs") {
    c.train.epochs = to_int(key, v);
  } else if (key == "train.minibatches") {
    c.train.minibatches = to_int(key, v);
  } else if (key == "train.lr") {
    c.train.lr = to_double(key, v);
  } else if (key == "train.max_grad_norm") {
    c.train.max_grad_norm = to_double(key, v);
  } else if (key == "train.permute_agents") {
    c.train.permute_agents = to_bool(key, v);
  } else if (key == "train.total_updates") {
    c.total_updates = to_int(key, v);
  } else if (key == "train.eval_interval") {
    c.eval_interval = to_int(key, v);
  } else if (key == "train.eval_episodes") {
    c.eval_episodes = to_int(key, v);
  } else if (key == "bench.agents") {
    c.bench.agents = to_list<int>(key, v, to_int);
    std::sort(c.bench.agents.begin(), c.bench.agents.end());
  } else if (key == "bench.reps") {
    c.bench.reps = to_int(key, v);
  } else if (key == "bench.warmup") {
    c.bench.warmup = to_int(key, v);
  } else if (key == "seeds") {
    auto ints = to_list<int>(key, v, to_int);
    c.seeds.clear();
    for (int s : ints) {
      if (s < 0) throw ConfigError("config: seeds: must be non-negative");
      c.seeds.push_back(static_cast<uint64_t>(s));
    }
  } else if (key == "out_dir") {
    c.out_dir = v;
  } else {
    unknown();
  }
}

}  // namespace detail

// Flat key=value grammar: one `section.key = value` per line, `#` starts a
// comment, blank lines ignored, lists are comma-separated. Unknown keys are
// rejected by name so typos cannot silently fall back to defaults.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::stringstream ss(text);
  std::string raw;
  int line = 0;
  while (std::getline(ss, raw)) {
    ++line;
    const size_t hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    raw = detail::trim(raw);
    if (raw.empty()) continue;
    const size_t eq = raw.find('=');
    if (eq == std::string::npos)
      throw detail::ConfigError("config: expected key = value (line " + std::to_string(line) + ")");
    const std::string key = detail::trim(raw.substr(0, eq));
    const std::string val = detail::trim(raw.substr(eq + 1));
    if (key.empty() || val.empty())
      throw detail::ConfigError("config: empty key or value (line " + std::to_string(line) + ")");
    detail::apply_key(c, key, val, line);
  }
  resolve_model_dims(c);
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw detail::ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace mam
