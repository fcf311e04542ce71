#pragma once

#include <algorithm>
#include <array>
#include <cstdlib>
#include <memory>

#include "mam/tensor.hpp"

namespace mam {

// Cooperative Markov game with one shared reward per step. Observations are
// one row per agent; the model appends agent-ID one-hots itself.
struct StepResult {
  Tensor obs;  // [n, obs_dim]
  double reward = 0;
  bool done = false;
};

class MarkovGame {
 public:
  virtual ~MarkovGame() = default;
  virtual int n_agents() const = 0;
  virtual int obs_dim() const = 0;
  virtual int n_actions() const = 0;
  // analytic upper bound on the undiscounted episode return
  virtual double optimal_return() const = 0;
  virtual Tensor reset(uint64_t seed) = 0;
  virtual StepResult step(const std::vector<int>& actions) = 0;
};

// All agents pick from k actions; the shared reward is 1 exactly when every
// agent picked the same one. Each agent observes its own last action one-hot
// (zeros right after reset). Optimal return over a horizon of T steps is T.
class ConsensusGame final : public MarkovGame {
 public:
  ConsensusGame(int n_agents, int n_actions, int horizon)
      : n_(n_agents), k_(n_actions), horizon_(horizon) {
    check(n_ > 0 && k_ > 0 && horizon_ > 0, "consensus: sizes must be positive");
  }

  int n_agents() const override { return n_; }
  int obs_dim() const override { return k_; }
  int n_actions() const override { return k_; }
  double optimal_return() const override { return horizon_; }

  Tensor reset(uint64_t) override {
    t_ = 0;
    last_ = std::vector<int>(n_, -1);
    return observe();
  }

  StepResult step(const std::vector<int>& actions) override {
    check(static_cast<int>(actions.size()) == n_, "consensus: one action per agent");
    for (int a : actions) check(a >= 0 && a < k_, "consensus: action id out of range");
    last_ = actions;
    ++t_;
    bool all_equal = true;
    for (int i = 1; i < n_; ++i) all_equal = all_equal && actions[i] == actions[0];
    return {observe(), all_equal ? 1.0 : 0.0, t_ >= horizon_};
  }

 private:
  Tensor observe() const {
    Tensor o = Tensor::zeros({n_, k_});
    for (int i = 0; i < n_; ++i)
      if (last_[i] >= 0) o.at(i, last_[i]) = 1.0;
    return o;
  }

  int n_, k_, horizon_;
  int t_ = 0;
  std::vector<int> last_;
};

// Grid world where agents carrying levels cooperate to load food items; a
// food is collected when the levels of adjacent loading agents sum to at
// least its level. The shared reward is the collected fraction of the total
// food level, so the per-episode return is at most 1.
struct ForagingLayout {
  int grid = 5;
  std::vector<std::array<int, 3>> agents;  // x, y, level
  std::vector<std::array<int, 3>> foods;   // x, y, level
};

class ForagingLite final : public MarkovGame {
 public:
  static constexpr int kStay = 0, kUp = 1, kDown = 2, kLeft = 3, kRight = 4, kLoad = 5;
  static constexpr int kMaxLevel = 3;

  // Fixed layout; reset always restores it (seed ignored).
  ForagingLite(const ForagingLayout& layout, int horizon)
      : fixed_(layout), use_fixed_(true), horizon_(horizon) {
    validate_layout(layout);
    n_ = static_cast<int>(layout.agents.size());
    f_ = static_cast<int>(layout.foods.size());
    g_ = layout.grid;
  }

  // Randomized layout drawn at every reset from the given seed.
  ForagingLite(int grid, int agents, int foods, int horizon)
      : use_fixed_(false), horizon_(horizon), n_(agents), f_(foods), g_(grid) {
    check(grid >= 2 && agents > 0 && foods > 0 && horizon > 0, "foraging: sizes must be positive");
    check(agents + foods <= grid * grid, "foraging: layout does not fit the grid");
  }

  int n_agents() const override { return n_; }
  int obs_dim() const override { return 3 + 2 * (n_ - 1) + 3 * f_; }
  int n_actions() const override { return 6; }
  double optimal_return() const override { return 1.0; }

  Tensor reset(uint64_t seed) override {
    t_ = 0;
    if (use_fixed_) {
      lay_ = fixed_;
    } else {
      lay_ = random_layout(seed);
    }
    present_.assign(f_, true);
    total_level_ = 0;
    for (const auto& fd : lay_.foods) total_level_ += fd[2];
    return observe();
  }

  StepResult step(const std::vector<int>& actions) override {
    check(static_cast<int>(actions.size()) == n_, "foraging: one action per agent");
    for (int a : actions) check(a >= 0 && a < 6, "foraging: action id out of range");
    ++t_;
    // moves resolve in agent order; blocked moves (walls, food, occupied
    // cells) leave the agent in place
    for (int i = 0; i < n_; ++i) {
      int x = lay_.agents[i][0], y = lay_.agents[i][1];
      int nx = x, ny = y;
      if (actions[i] == kUp) ny = y - 1;
      if (actions[i] == kDown) ny = y + 1;
      if (actions[i] == kLeft) nx = x - 1;
      if (actions[i] == kRight) nx = x + 1;
      if (nx == x && ny == y) continue;
      if (nx < 0 || ny < 0 || nx >= g_ || ny >= g_) continue;
      if (occupied(nx, ny)) continue;
      lay_.agents[i][0] = nx;
      lay_.agents[i][1] = ny;
    }
    // each loading agent contributes its level to the lowest-indexed food it
    // stands next to
    std::vector<int> load_sum(f_, 0);
    for (int i = 0; i < n_; ++i) {
      if (actions[i] != kLoad) continue;
      const int j = adjacent_food(lay_.agents[i][0], lay_.agents[i][1]);
      if (j >= 0) load_sum[j] += lay_.agents[i][2];
    }
    double reward = 0;
    int remaining = 0;
    for (int j = 0; j < f_; ++j) {
      if (present_[j] && load_sum[j] >= lay_.foods[j][2]) {
        present_[j] = false;
        reward += static_cast<double>(lay_.foods[j][2]) / total_level_;
      }
      remaining += present_[j] ? 1 : 0;
    }
    return {observe(), reward, remaining == 0 || t_ >= horizon_};
  }

 private:
  static void validate_layout(const ForagingLayout& l) {
    check(l.grid >= 2, "foraging: grid too small");
    check(!l.agents.empty() && !l.foods.empty(), "foraging: layout needs agents and food");
    auto in_grid = [&](const std::array<int, 3>& c) {
      return c[0] >= 0 && c[0] < l.grid && c[1] >= 0 && c[1] < l.grid;
    };
    for (const auto& a : l.agents)
      check(in_grid(a) && a[2] >= 1, "foraging: agent cell or level invalid");
    for (const auto& fd : l.foods)
      check(in_grid(fd) && fd[2] >= 1, "foraging: food cell or level invalid");
  }

  bool occupied(int x, int y) const {
    for (const auto& a : lay_.agents)
      if (a[0] == x && a[1] == y) return true;
    for (int j = 0; j < f_; ++j)
      if (present_[j] && lay_.foods[j][0] == x && lay_.foods[j][1] == y) return true;
    return false;
  }

  int adjacent_food(int x, int y) const {
    for (int j = 0; j < f_; ++j) {
      if (!present_[j]) continue;
      const int dx = std::abs(lay_.foods[j][0] - x), dy = std::abs(lay_.foods[j][1] - y);
      if (dx + dy == 1) return j;
    }
    return -1;
  }

  ForagingLayout random_layout(uint64_t seed) const {
    Rng rng(seed);
    ForagingLayout l;
    l.grid = g_;
    std::vector<int> cells(g_ * g_);
    for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    for (size_t i = cells.size(); i > 1; --i) std::swap(cells[i - 1], cells[rng.randint(static_cast<int>(i))]);
    int levels = 0;
    for (int i = 0; i < n_; ++i) {
      const int lv = 1 + rng.randint(kMaxLevel);
      l.agents.push_back({cells[i] % g_, cells[i] / g_, lv});
      levels += lv;
    }
    // keep every food reachable: at most four agents fit around one cell
    std::vector<int> top;
    for (const auto& a : l.agents) top.push_back(a[2]);
    std::sort(top.begin(), top.end(), std::greater<int>());
    int cap = 0;
    for (size_t i = 0; i < top.size() && i < 4; ++i) cap += top[i];
    for (int j = 0; j < f_; ++j)
      l.foods.push_back({cells[n_ + j] % g_, cells[n_ + j] / g_, 1 + rng.randint(cap)});
    return l;
  }

  Tensor observe() const {
    const double gs = g_, ls = kMaxLevel;
    Tensor o = Tensor::zeros({n_, obs_dim()});
    for (int i = 0; i < n_; ++i) {
      int c = 0;
      o.at(i, c++) = lay_.agents[i][0] / gs;
      o.at(i, c++) = lay_.agents[i][1] / gs;
      o.at(i, c++) = lay_.agents[i][2] / ls;
      for (int m = 0; m < n_; ++m) {
        if (m == i) continue;
        o.at(i, c++) = lay_.agents[m][0] / gs;
        o.at(i, c++) = lay_.agents[m][1] / gs;
      }
      for (int j = 0; j < f_; ++j) {
        if (present_[j]) {
          o.at(i, c++) = lay_.foods[j][0] / gs;
          o.at(i, c++) = lay_.foods[j][1] / gs;
          o.at(i, c++) = lay_.foods[j][2] / ls;
        } else {
          c += 3;
        }
      }
    }
    return o;
  }

  ForagingLayout fixed_;
  bool use_fixed_;
  int horizon_;
  int n_, f_, g_;
  int t_ = 0;
  ForagingLayout lay_;
  std::vector<bool> present_;
  double total_level_ = 0;
};

}  // namespace mam
