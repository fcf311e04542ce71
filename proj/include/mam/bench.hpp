#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <vector>

#include "mam/config.hpp"
#include "mam/model.hpp"

namespace mam {

// Inference-scaling benchmark: wall-clock time of one full autoregressive
// joint-action decode (one environment step) as the agent count grows, fitted
// as a log-log slope per model family. Weights are untrained and cast to
// single precision; the encoder runs once outside the timed region.

inline constexpr const char* kBenchSchema = "bench_v1";

struct BenchPoint {
  std::string model;
  int n_agents = 0;
  double mean_s = 0;  // median of per-repetition means
  double std_s = 0;   // spread of per-repetition means
  int reps = 0;
  int inner = 0;  // decodes per timed sample, grown until the timer resolves
};

struct BenchReport {
  std::vector<BenchPoint> points;
  double mam_slope = 0;
  double attention_slope = 0;
  std::string csv_path;
};

namespace detail {

// keeps the optimizer from discarding untimed decode results
inline volatile long long bench_sink = 0;

template <class F>
double time_block_s(F&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// One comparison size; everything but the decode loop stays outside the timer.
inline ModelConfig bench_model_config(ModelKind kind, int n_agents) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.d_model = 128;
  cfg.n_state = 32;
  cfg.dt_rank = 128;
  cfg.conv_width = 4;
  cfg.n_blocks = 1;
  cfg.n_heads = 1;
  cfg.n_agents = n_agents;
  cfg.obs_dim = 16;
  cfg.n_actions = 5;
  cfg.add_agent_id = false;  // identity one-hots only widen the untimed encoder
  return cfg;
}

inline BenchPoint bench_decode_point(ModelKind kind, int n_agents, int reps, int warmup,
                                     uint64_t seed) {
  check(n_agents >= 1, "bench: agent count must be positive");
  check(reps >= 1 && warmup >= 0, "bench: repetition counts must be sensible");
  const ModelConfig cfg = bench_model_config(kind, n_agents);
  Rng rng(seed ^ static_cast<uint64_t>(n_agents) * 0x9e3779b97f4a7c15ull);
  const TensorT<float> obs =
      rand_normal<double>(rng, {cfg.n_agents, cfg.input_dim()}).cast<float>();

  std::function<void()> decode_once;
  if (kind == ModelKind::Mam) {
    MamParamsT<float> m = cast_mam<float>(init_mam_model(cfg, seed));
    TensorT<float> repr = mam_encode_plain(m, obs, cfg.disc).repr;
    decode_once = [m, repr, cfg]() {
      long long acc = 0;
      for (int a : mam_decode_autoregressive(m, repr, cfg, nullptr)) acc += a;
      detail::bench_sink = detail::bench_sink + acc;
    };
  } else {
    MatParamsT<float> m = cast_mat<float>(init_mat_model(cfg, seed));
    TensorT<float> repr = mat_encode_plain(m, obs).repr;
    decode_once = [m, repr, cfg]() {
      long long acc = 0;
      for (int a : mat_decode_autoregressive(m, repr, cfg, nullptr)) acc += a;
      detail::bench_sink = detail::bench_sink + acc;
    };
  }

  // grow the batch until one sample comfortably exceeds the timer resolution
  int inner = 1;
  double probe = detail::time_block_s([&] { decode_once(); });
  while (probe < 1e-3 && inner < (1 << 20)) {
    inner *= 2;
    probe = detail::time_block_s([&] {
      for (int i = 0; i < inner; ++i) decode_once();
    });
  }

  for (int w = 0; w < warmup; ++w)
    detail::time_block_s([&] {
      for (int i = 0; i < inner; ++i) decode_once();
    });

  std::vector<double> rep_means(static_cast<size_t>(reps));
  for (int r = 0; r < reps; ++r)
    rep_means[r] = detail::time_block_s([&] {
                     for (int i = 0; i < inner; ++i) decode_once();
                   }) /
                   inner;

  BenchPoint pt;
  pt.model = model_kind_name(kind);
  pt.n_agents = n_agents;
  pt.mean_s = detail::median(rep_means);
  double acc = 0, mean = 0;
  for (double v : rep_means) mean += v;
  mean /= reps;
  for (double v : rep_means) acc += (v - mean) * (v - mean);
  pt.std_s = reps > 1 ? std::sqrt(acc / (reps - 1)) : 0.0;
  pt.reps = reps;
  pt.inner = inner;
  return pt;
}

inline double loglog_slope(const std::vector<BenchPoint>& points) {
  check(points.size() >= 2, "bench: slope fit needs at least two agent counts");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(points.size());
  for (const auto& p : points) {
    check(p.mean_s > 0, "bench: nonpositive timing cannot be fitted");
    const double x = std::log(static_cast<double>(p.n_agents)), y = std::log(p.mean_s);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline BenchReport run_bench(const BenchConfig& bc, const std::filesystem::path& out_dir,
                             uint64_t seed) {
  bc.validate();
  check(bc.agents.size() >= 2, "bench: slope fit needs at least two agent counts");
  BenchReport rep;
  for (ModelKind kind : {ModelKind::Mam, ModelKind::Attention}) {
    std::vector<BenchPoint> pts;
    for (int n : bc.agents) pts.push_back(bench_decode_point(kind, n, bc.reps, bc.warmup, seed));
    const double slope = loglog_slope(pts);
    (kind == ModelKind::Mam ? rep.mam_slope : rep.attention_slope) = slope;
    rep.points.insert(rep.points.end(), pts.begin(), pts.end());
  }

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path csv_path = out_dir / ("bench_seed" + std::to_string(seed) + ".csv");
  std::ofstream csv(csv_path);
  check(csv.good(), "bench: cannot open csv for writing: " + csv_path.string());
  csv << "# schema=" << kBenchSchema << "\n";
  csv << "model,n_agents,mean_s,std_s,reps\n";
  csv << std::setprecision(9);
  for (const auto& p : rep.points)
    csv << p.model << ',' << p.n_agents << ',' << p.mean_s << ',' << p.std_s << ',' << p.reps
        << "\n";
  csv << "# slope model=mam " << rep.mam_slope << "\n";
  csv << "# slope model=attention " << rep.attention_slope << "\n";
  rep.csv_path = csv_path.string();
  return rep;
}

}  // namespace mam
