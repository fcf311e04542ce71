#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mam/bench.hpp"
#include "mam/checkpoint.hpp"
#include "mam/train.hpp"
#include "mam/verify.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string model;
  int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "key=value run configuration file")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "replace the configured seed list with this one seed")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--out", a.out_dir, "output directory");
  cmd->add_option("--model", a.model, "policy family")
      ->check(CLI::IsMember({"mam", "attention"}));
}

mam::RunConfig make_config(const CommonArgs& a) {
  mam::RunConfig cfg;
  if (!a.config_path.empty())
    cfg = mam::parse_config(a.config_path);
  else
    mam::resolve_model_dims(cfg);
  if (!a.model.empty()) cfg.model.kind = mam::model_kind_from_name(a.model);
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (a.seed >= 0) cfg.seeds = {static_cast<uint64_t>(a.seed)};
  cfg.validate();
  return cfg;
}

int cmd_train(const CommonArgs& a) {
  mam::RunConfig cfg = make_config(a);
  bool ok = true;
  for (uint64_t seed : cfg.seeds) {
    mam::TrainResult r = mam::run_train(cfg, seed);
    std::printf("%s seed %llu: final eval return %.4f +/- %.4f%s\n",
                mam::model_kind_name(cfg.model.kind), static_cast<unsigned long long>(seed),
                r.final_eval_mean, r.final_eval_ci95, r.aborted ? "  [ABORTED]" : "");
    std::printf("  metrics    %s\n", r.metrics_path.c_str());
    std::printf("  checkpoint %s\n", r.checkpoint_path.c_str());
    ok = ok && !r.aborted;
  }
  return ok ? 0 : 1;
}

int cmd_eval(const CommonArgs& a, const std::string& ckpt_flag, int episodes_flag) {
  mam::RunConfig cfg = make_config(a);
  const uint64_t seed = cfg.seeds.front();
  std::string path = ckpt_flag;
  if (path.empty())
    path = cfg.out_dir + "/checkpoint_" + mam::model_kind_name(cfg.model.kind) + "_seed" +
           std::to_string(seed) + ".bin";
  mam::LoadedCheckpoint lc = mam::load_checkpoint(path);

  auto env = mam::make_env(cfg.env);
  mam::check(lc.cfg.n_agents == env->n_agents() && lc.cfg.obs_dim == env->obs_dim() &&
                 lc.cfg.n_actions == env->n_actions(),
             "eval: checkpoint geometry does not match the configured environment");

  const int episodes = episodes_flag > 0 ? episodes_flag : cfg.eval_episodes;
  // the same fixed episode seeds the trainer evaluates with, so the final
  // metrics row is reproducible from its checkpoint
  mam::EvalStats es = mam::evaluate_policy(lc.policy, cfg.env, episodes, 0xe7a1);
  std::printf("checkpoint %s\n", path.c_str());
  std::printf("%s greedy return over %d episodes: %.6f +/- %.6f (95%% ci), optimum %.1f\n",
              mam::model_kind_name(lc.cfg.kind), episodes, es.mean, es.ci95,
              env->optimal_return());
  return 0;
}

int cmd_bench(const CommonArgs& a) {
  mam::RunConfig cfg = make_config(a);
  mam::BenchReport r = mam::run_bench(cfg.bench, cfg.out_dir, cfg.seeds.front());
  for (const auto& p : r.points)
    std::printf("%-10s n=%-4d decode %.6es  spread %.1es  reps %d  inner %d\n", p.model.c_str(),
                p.n_agents, p.mean_s, p.std_s, p.reps, p.inner);
  std::printf("log-log slope: mam %.3f, attention %.3f\n", r.mam_slope, r.attention_slope);
  std::printf("csv %s\n", r.csv_path.c_str());
  return 0;
}

int cmd_verify(const CommonArgs& a, bool inject_fault) {
  mam::RunConfig cfg = make_config(a);
  mam::VerifyReport r = mam::run_verify(inject_fault, cfg.seeds.front());
  for (const auto& s : r.suites) {
    std::printf("[%s] %s\n", s.passed() ? "pass" : "FAIL", s.name.c_str());
    for (const auto& p : s.parts)
      std::printf("    %-44s max_error %-12.3e tolerance %-8.0e cases %d\n", p.name.c_str(),
                  p.max_error, p.tolerance, p.cases);
  }

  nlohmann::json j;
  j["schema"] = "verify_report_v1";
  j["fault_injection"] = r.fault_injection;
  j["all_passed"] = r.all_passed();
  j["suites"] = nlohmann::json::array();
  for (const auto& s : r.suites) {
    nlohmann::json js;
    js["name"] = s.name;
    js["passed"] = s.passed();
    js["parts"] = nlohmann::json::array();
    for (const auto& p : s.parts)
      js["parts"].push_back({{"name", p.name},
                             {"tolerance", p.tolerance},
                             {"max_error", p.max_error},
                             {"cases", p.cases},
                             {"passed", p.passed()}});
    j["suites"].push_back(js);
  }
  std::filesystem::create_directories(cfg.out_dir);
  const std::string report_path = cfg.out_dir + "/verify_report.json";
  std::ofstream out(report_path);
  mam::check(out.good(), "verify: cannot open report for writing: " + report_path);
  out << j.dump(2) << "\n";
  std::printf("report %s\n", report_path.c_str());
  return r.all_passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"encoder-decoder policies for cooperative multi-agent control"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, bench_args, verify_args;
  std::string ckpt;
  int episodes = 0;
  bool inject_fault = false;

  CLI::App* train = app.add_subcommand("train", "train a policy, write metrics and a checkpoint");
  add_common(train, train_args);

  CLI::App* evalc = app.add_subcommand("eval", "greedy-evaluate a saved checkpoint");
  add_common(evalc, eval_args);
  evalc->add_option("--ckpt", ckpt, "checkpoint path (default: derived from out dir, model, seed)");
  evalc->add_option("--episodes", episodes, "evaluation episode count")
      ->check(CLI::PositiveNumber);

  CLI::App* bench = app.add_subcommand("bench", "time joint-action decoding across agent counts");
  add_common(bench, bench_args);

  CLI::App* verify = app.add_subcommand("verify", "run every oracle and property suite");
  add_common(verify, verify_args);
  verify->add_flag("--inject-fault", inject_fault,
                   "corrupt the scan route on purpose to demonstrate oracle sensitivity");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_args);
    if (evalc->parsed()) return cmd_eval(eval_args, ckpt, episodes);
    if (bench->parsed()) return cmd_bench(bench_args);
    if (verify->parsed()) return cmd_verify(verify_args, inject_fault);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
