#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "mam/bench.hpp"
#include "mam/checkpoint.hpp"
#include "mam/config.hpp"
#include "mam/train.hpp"
#include "mam/verify.hpp"

using namespace mam;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string fresh_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("mam_harness_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// drops the trailing wall-clock column from every data row
std::string without_timing(const std::string& csv) {
  std::stringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') {
      const size_t c = line.rfind(',');
      if (c != std::string::npos) line = line.substr(0, c);
    }
    out += line;
    out += '\n';
  }
  return out;
}

const char* kSmallRun =
    "env.name = consensus\n"
    "env.n_agents = 2\n"
    "env.n_actions = 2\n"
    "env.horizon = 4\n"
    "model.d_model = 16\n"
    "model.n_state = 4\n"
    "model.dt_rank = 4\n"
    "model.n_blocks = 1\n"
    "train.rollout_length = 8\n"
    "train.epochs = 2\n"
    "train.minibatches = 2\n"
    "train.total_updates = 3\n"
    "train.eval_interval = 1\n"
    "train.eval_episodes = 4\n";

}  // namespace

TEST_CASE("empty config yields defaults with env-driven model geometry") {
  RunConfig c = parse_config_text("");
  REQUIRE(c.model.kind == ModelKind::Mam);
  REQUIRE(c.model.d_model == 64);
  REQUIRE(c.model.disc == Discretization::Euler);
  REQUIRE(c.env.name == "consensus");
  REQUIRE(c.env.n_agents == 3);
  // geometry mirrors the environment: one-hot of the own last action
  REQUIRE(c.model.n_agents == 3);
  REQUIRE(c.model.obs_dim == 4);
  REQUIRE(c.model.n_actions == 4);
  REQUIRE(c.model.input_dim() == 4 + 3);
  REQUIRE(c.train.gamma == 0.99);
  REQUIRE(c.train.lam == 0.9);
  REQUIRE(c.train.clip_eps == 0.1);
  REQUIRE(c.train.rollout_length == 128);
  REQUIRE(c.total_updates == 60);
  REQUIRE(c.seeds == std::vector<uint64_t>{1});
  REQUIRE(c.bench.agents == std::vector<int>({8, 16, 32, 64, 128, 256}));
}

TEST_CASE("config keys land in their fields") {
  RunConfig c = parse_config_text(
      "# attention baseline on the grid task\n"
      "model.kind = attention\n"
      "model.d_model = 32   # narrow\n"
      "model.n_heads = 4\n"
      "env.name = foraging\n"
      "env.n_agents = 2\n"
      "env.grid = 4\n"
      "env.n_food = 1\n"
      "env.horizon = 12\n"
      "\n"
      "train.lr = 0.001\n"
      "train.rollout_length = 64\n"
      "train.minibatches = 4\n"
      "train.permute_agents = true\n"
      "train.total_updates = 5\n"
      "train.eval_interval = 2\n"
      "train.eval_episodes = 8\n"
      "bench.agents = 32, 8, 16\n"
      "bench.reps = 5\n"
      "seeds = 3, 1, 2\n"
      "out_dir = runs/a\n");
  REQUIRE(c.model.kind == ModelKind::Attention);
  REQUIRE(c.model.d_model == 32);
  REQUIRE(c.model.n_heads == 4);
  REQUIRE(c.env.name == "foraging");
  // foraging geometry: own (x, y, level), other agents (x, y), food (x, y, level)
  REQUIRE(c.model.obs_dim == 3 + 2 + 3);
  REQUIRE(c.model.n_actions == 6);
  REQUIRE(c.train.lr == 0.001);
  REQUIRE(c.train.permute_agents);
  REQUIRE(c.total_updates == 5);
  REQUIRE(c.eval_interval == 2);
  REQUIRE(c.eval_episodes == 8);
  REQUIRE(c.bench.agents == std::vector<int>({8, 16, 32}));
  REQUIRE(c.bench.reps == 5);
  REQUIRE(c.seeds == std::vector<uint64_t>({3, 1, 2}));
  REQUIRE(c.out_dir == "runs/a");
}

TEST_CASE("config rejects unknown keys and malformed values by name") {
  REQUIRE_THROWS_WITH(parse_config_text("model.dmodel = 32\n"),
                      ContainsSubstring("unknown key 'model.dmodel'") &&
                          ContainsSubstring("line 1"));
  REQUIRE_THROWS_WITH(parse_config_text("env.horizon = 8\n\ntrain.clip = 0.2\n"),
                      ContainsSubstring("line 3"));
  REQUIRE_THROWS_WITH(parse_config_text("train.lr = fast\n"),
                      ContainsSubstring("train.lr") && ContainsSubstring("number"));
  REQUIRE_THROWS_WITH(parse_config_text("model.d_model = 3.5\n"),
                      ContainsSubstring("model.d_model") && ContainsSubstring("integer"));
  REQUIRE_THROWS_WITH(parse_config_text("train.permute_agents = yes\n"),
                      ContainsSubstring("true or false"));
  REQUIRE_THROWS_WITH(parse_config_text("model.kind = transformer\n"),
                      ContainsSubstring("unknown model"));
  REQUIRE_THROWS_WITH(parse_config_text("just words\n"), ContainsSubstring("key = value"));
  REQUIRE_THROWS_WITH(parse_config_text("env.n_agents =\n"), ContainsSubstring("empty"));
  REQUIRE_THROWS_WITH(parse_config_text("bench.agents = ,\n"),
                      ContainsSubstring("comma-separated"));
}

TEST_CASE("config validation names the offending field") {
  REQUIRE_THROWS_WITH(parse_config_text("env.n_agents = -2\n"),
                      ContainsSubstring("env.n_agents"));
  REQUIRE_THROWS_WITH(parse_config_text("train.gamma = 1.5\n"), ContainsSubstring("train.gamma"));
  REQUIRE_THROWS_WITH(parse_config_text("model.d_model = 32\nmodel.n_heads = 3\n"),
                      ContainsSubstring("must divide d_model"));
  REQUIRE_THROWS_WITH(parse_config_text("train.minibatches = 200\n"),
                      ContainsSubstring("train.minibatches"));
  REQUIRE_THROWS_WITH(parse_config_text("seeds = -3\n"), ContainsSubstring("seeds"));
  REQUIRE_THROWS_WITH(parse_config_text("env.name = tag\n"), ContainsSubstring("env.name"));
}

TEST_CASE("checkpoint round trip restores configuration and parameters exactly") {
  const auto kind = GENERATE(ModelKind::Mam, ModelKind::Attention);
  ModelConfig mc;
  mc.kind = kind;
  mc.d_model = 16;
  mc.n_state = 4;
  mc.dt_rank = 4;
  mc.n_blocks = 2;
  mc.n_heads = 2;
  mc.n_agents = 3;
  mc.obs_dim = 5;
  mc.n_actions = 4;
  mc.disc = Discretization::Zoh;
  Policy p = init_policy(mc, 99);
  const std::string dir = fresh_dir(std::string("ckpt_") + model_kind_name(kind));
  const std::string path = dir + "/model.bin";
  save_checkpoint(p, path);

  LoadedCheckpoint lc = load_checkpoint(path);
  REQUIRE(lc.cfg.kind == mc.kind);
  REQUIRE(lc.cfg.d_model == mc.d_model);
  REQUIRE(lc.cfg.n_state == mc.n_state);
  REQUIRE(lc.cfg.dt_rank == mc.dt_rank);
  REQUIRE(lc.cfg.n_blocks == mc.n_blocks);
  REQUIRE(lc.cfg.n_heads == mc.n_heads);
  REQUIRE(lc.cfg.n_agents == mc.n_agents);
  REQUIRE(lc.cfg.obs_dim == mc.obs_dim);
  REQUIRE(lc.cfg.n_actions == mc.n_actions);
  REQUIRE(lc.cfg.add_agent_id == mc.add_agent_id);
  REQUIRE(lc.cfg.disc == mc.disc);

  ParamIndex a = index_params(p);
  ParamIndex b = index_params(lc.policy);
  REQUIRE(a.names == b.names);
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    REQUIRE(a.tensors[i]->shape == b.tensors[i]->shape);
    REQUIRE(std::memcmp(a.tensors[i]->data.data(), b.tensors[i]->data.data(),
                        a.tensors[i]->data.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("checkpoint refuses foreign and damaged files by error code") {
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_state = 2;
  mc.dt_rank = 2;
  const std::string dir = fresh_dir("ckpt_damage");
  const std::string good = dir + "/good.bin";
  save_checkpoint(init_policy(mc, 4), good);
  const std::string bytes = read_file(good);

  SECTION("foreign magic") {
    write_file(dir + "/alien.bin", "NOTANMDL" + bytes.substr(8));
    try {
      load_checkpoint(dir + "/alien.bin");
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CkptError::BadMagic);
      REQUIRE_THAT(e.what(), ContainsSubstring("bad_magic"));
    }
  }

  SECTION("newer format version") {
    std::string bumped = bytes;
    bumped[8] = 2;  // little-endian version word follows the magic
    write_file(dir + "/future.bin", bumped);
    try {
      load_checkpoint(dir + "/future.bin");
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CkptError::VersionMismatch);
      REQUIRE_THAT(e.what(), ContainsSubstring("version 2"));
    }
  }

  SECTION("truncated data") {
    write_file(dir + "/cut.bin", bytes.substr(0, bytes.size() - 5));
    try {
      load_checkpoint(dir + "/cut.bin");
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CkptError::Truncated);
    }
  }

  SECTION("truncated header") {
    write_file(dir + "/stub.bin", bytes.substr(0, 4));
    try {
      load_checkpoint(dir + "/stub.bin");
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CkptError::Truncated);
      REQUIRE_THAT(e.what(), ContainsSubstring("magic"));
    }
  }

  SECTION("missing file") {
    try {
      load_checkpoint(dir + "/absent.bin");
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CkptError::IoError);
    }
  }
}

TEST_CASE("checkpoint shape mismatch names the first offending array") {
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_state = 2;
  mc.dt_rank = 2;
  const std::string dir = fresh_dir("ckpt_shape");
  const std::string path = dir + "/model.bin";
  save_checkpoint(init_policy(mc, 4), path);

  SECTION("same layout, wider target") {
    ModelConfig want = mc;
    want.d_model = 12;
    try {
      load_checkpoint(path, &want);
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CkptError::ShapeMismatch);
      REQUIRE_THAT(e.what(), ContainsSubstring("array '"));
      REQUIRE_THAT(e.what(), ContainsSubstring("mismatched shape"));
    }
  }

  SECTION("different architecture") {
    ModelConfig want = mc;
    want.kind = ModelKind::Attention;
    try {
      load_checkpoint(path, &want);
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CkptError::ShapeMismatch);
      REQUIRE_THAT(e.what(), ContainsSubstring("does not exist"));
    }
  }
}

TEST_CASE("adam clips by scaling the gradient before the moments") {
  Tensor w1 = Tensor::from({2}, {1.0, 2.0});
  Tensor w2 = w1;
  ParamIndex ix1, ix2;
  ix1.names = ix2.names = {"w"};
  ix1.tensors = {&w1};
  ix2.tensors = {&w2};
  Adam clipped(ix1, 0.05), prescaled(ix2, 0.05);

  // clip at 0.5 against raw norms 10 and 20 equals feeding the scaled gradient
  std::unordered_map<int, Tensor> g;
  g.emplace(0, Tensor::from({2}, {10.0, 0.0}));
  REQUIRE(clipped.step(ix1, g, 0.5) == Catch::Approx(10.0));
  g.at(0) = Tensor::from({2}, {0.5, 0.0});
  prescaled.step(ix2, g, 1e18);
  REQUIRE(w1[0] == w2[0]);
  REQUIRE(w1[1] == w2[1]);

  g.at(0) = Tensor::from({2}, {0.0, 20.0});
  REQUIRE(clipped.step(ix1, g, 0.5) == Catch::Approx(20.0));
  g.at(0) = Tensor::from({2}, {0.0, 0.5});
  prescaled.step(ix2, g, 1e18);
  REQUIRE(w1[0] == w2[0]);
  REQUIRE(w1[1] == w2[1]);
}

TEST_CASE("adam first step moves each weight by about the learning rate") {
  // bias correction makes |update| = lr * g / (|g| + eps) on the first step
  Tensor w = Tensor::from({3}, {1.0, -2.0, 0.5});
  ParamIndex ix;
  ix.names = {"w"};
  ix.tensors = {&w};
  Adam adam(ix, 0.1);
  std::unordered_map<int, Tensor> g;
  g.emplace(0, Tensor::from({3}, {3.0, -4.0, 0.0}));
  const double norm = adam.step(ix, g, 1e9);
  REQUIRE(norm == Catch::Approx(5.0).margin(1e-12));
  REQUIRE(w[0] == Catch::Approx(1.0 - 0.1).margin(1e-8));
  REQUIRE(w[1] == Catch::Approx(-2.0 + 0.1).margin(1e-8));
  REQUIRE(w[2] == 0.5);
}

TEST_CASE("ppo update moves parameters and reports finite statistics") {
  const auto kind = GENERATE(ModelKind::Mam, ModelKind::Attention);
  RunConfig cfg = parse_config_text(kSmallRun);
  cfg.model.kind = kind;
  auto env = make_env(cfg.env);
  Policy policy = init_policy(cfg.model, 3);
  Policy before = policy;
  ParamIndex ix = index_params(policy);
  Adam adam(ix, cfg.train.lr);
  RolloutCollector collector(*env, 11);
  RolloutBatch batch = collector.collect(policy, cfg.train);
  Rng rng(5);
  UpdateStats st = ppo_update(policy, ix, adam, batch, cfg.train, rng);

  REQUIRE(std::isfinite(st.loss));
  REQUIRE(st.value_loss >= 0.0);
  REQUIRE(st.entropy > 0.0);
  REQUIRE(st.grad_norm > 0.0);
  REQUIRE(st.clip_frac >= 0.0);
  REQUIRE(st.clip_frac <= 1.0);

  ParamIndex bix = index_params(before);
  bool moved = false;
  for (size_t i = 0; i < ix.tensors.size() && !moved; ++i)
    for (long long k = 0; k < ix.tensors[i]->numel() && !moved; ++k)
      moved = (*ix.tensors[i])[k] != (*bix.tensors[i])[k];
  REQUIRE(moved);
}

TEST_CASE("training runs are reproducible for a fixed seed") {
  const auto kind = GENERATE(ModelKind::Mam, ModelKind::Attention);
  const std::string tag = model_kind_name(kind);
  RunConfig cfg = parse_config_text(kSmallRun);
  cfg.model.kind = kind;

  cfg.out_dir = fresh_dir("train_a_" + tag);
  TrainResult r1 = run_train(cfg, 7);
  cfg.out_dir = fresh_dir("train_b_" + tag);
  TrainResult r2 = run_train(cfg, 7);
  REQUIRE_FALSE(r1.aborted);
  REQUIRE_FALSE(r2.aborted);

  const std::string m1 = read_file(r1.metrics_path);
  REQUIRE_THAT(m1, ContainsSubstring("# schema=train_metrics_v1"));
  REQUIRE_THAT(m1, ContainsSubstring("update,env_steps,eval_return_mean"));
  // identical metric values once the timing column is dropped
  REQUIRE(without_timing(m1) == without_timing(read_file(r2.metrics_path)));
  // bit-identical parameters
  REQUIRE(read_file(r1.checkpoint_path) == read_file(r2.checkpoint_path));

  LoadedCheckpoint lc = load_checkpoint(r1.checkpoint_path);
  REQUIRE(lc.cfg.kind == kind);
  REQUIRE(lc.cfg.n_agents == 2);

  cfg.out_dir = fresh_dir("train_c_" + tag);
  TrainResult r3 = run_train(cfg, 8);
  REQUIRE(without_timing(m1) != without_timing(read_file(r3.metrics_path)));
}

TEST_CASE("a numeric blowup aborts the run and keeps the last finite parameters") {
  RunConfig cfg = parse_config_text(kSmallRun);
  cfg.train.lr = 1e200;
  cfg.out_dir = fresh_dir("train_abort");
  TrainResult r = run_train(cfg, 7);
  REQUIRE(r.aborted);
  REQUIRE_THAT(read_file(r.metrics_path), ContainsSubstring("# aborted at update"));

  LoadedCheckpoint lc = load_checkpoint(r.checkpoint_path);
  ParamIndex ix = index_params(lc.policy);
  for (const Tensor* t : ix.tensors) REQUIRE(t->all_finite());
}

TEST_CASE("verify covers every suite once and passes on a healthy build") {
  VerifyReport r = run_verify(false, 1);
  REQUIRE_FALSE(r.fault_injection);

  const std::vector<std::string> expected = {
      "scan_vs_attention_matrix",    "parallel_vs_sequential_scan",
      "gradient_checks",             "causality_and_bidirectionality",
      "teacher_forcing_consistency", "gae_oracle",
      "advantage_decomposition"};
  REQUIRE(r.suites.size() == expected.size());
  for (size_t i = 0; i < expected.size(); ++i) REQUIRE(r.suites[i].name == expected[i]);

  for (const SuiteOutcome& s : r.suites) {
    INFO(s.name);
    REQUIRE_FALSE(s.parts.empty());
    for (const CheckPart& p : s.parts) {
      INFO(p.name);
      REQUIRE(p.cases > 0);
      REQUIRE(p.max_error <= p.tolerance);
    }
    REQUIRE(s.passed());
  }
  REQUIRE(r.all_passed());

  // the report is a pure function of the seed
  VerifyReport r2 = run_verify(false, 1);
  for (size_t i = 0; i < r.suites.size(); ++i) {
    REQUIRE(r.suites[i].parts.size() == r2.suites[i].parts.size());
    for (size_t j = 0; j < r.suites[i].parts.size(); ++j)
      REQUIRE(r.suites[i].parts[j].max_error == r2.suites[i].parts[j].max_error);
  }
}

TEST_CASE("injected discretization fault trips exactly the scan oracle") {
  VerifyReport r = run_verify(true, 1);
  REQUIRE(r.fault_injection);
  REQUIRE_FALSE(r.all_passed());
  for (const SuiteOutcome& s : r.suites) {
    INFO(s.name);
    if (s.name != "scan_vs_attention_matrix") {
      REQUIRE(s.passed());
      continue;
    }
    REQUIRE_FALSE(s.passed());
    for (const CheckPart& p : s.parts) {
      INFO(p.name);
      if (p.name == "euler") {
        // the fault swaps the scan route to the zero-order hold while the
        // matrix oracle keeps the forward difference
        REQUIRE_FALSE(p.passed());
        REQUIRE(p.max_error > 1e-3);
      } else {
        REQUIRE(p.passed());
      }
    }
  }
}

TEST_CASE("bench times every grid point and is stable under doubled repetitions") {
  BenchConfig bc;
  bc.agents = {2, 4};
  bc.reps = 4;
  bc.warmup = 1;
  const std::string dir = fresh_dir("bench");
  BenchReport a = run_bench(bc, dir, 5);

  REQUIRE(a.points.size() == 4);
  REQUIRE(a.points[0].model == "mam");
  REQUIRE(a.points[1].model == "mam");
  REQUIRE(a.points[2].model == "attention");
  REQUIRE(a.points[3].model == "attention");
  REQUIRE(a.points[0].n_agents == 2);
  REQUIRE(a.points[1].n_agents == 4);
  for (const BenchPoint& p : a.points) {
    REQUIRE(p.mean_s > 0.0);
    REQUIRE(p.std_s >= 0.0);
    REQUIRE(p.reps == 4);
    REQUIRE(p.inner >= 1);
  }
  REQUIRE(std::isfinite(a.mam_slope));
  REQUIRE(std::isfinite(a.attention_slope));

  // sub-resolution batches get their inner loop widened until measurable
  bool widened = false;
  for (const BenchPoint& p : a.points) widened = widened || p.inner > 1;
  REQUIRE(widened);

  const std::string csv = read_file(a.csv_path);
  REQUIRE_THAT(csv, ContainsSubstring("# schema=bench_v1"));
  REQUIRE_THAT(csv, ContainsSubstring("model,n_agents,mean_s,std_s,reps"));
  REQUIRE_THAT(csv, ContainsSubstring("# slope model=mam "));
  REQUIRE_THAT(csv, ContainsSubstring("# slope model=attention "));
  REQUIRE_THAT(csv, ContainsSubstring("mam,2,"));
  REQUIRE_THAT(csv, ContainsSubstring("attention,4,"));

  BenchConfig doubled = bc;
  doubled.reps = 8;
  BenchReport b = run_bench(doubled, dir, 5);
  REQUIRE(b.points.size() == a.points.size());
  for (size_t i = 0; i < a.points.size(); ++i) {
    REQUIRE(b.points[i].model == a.points[i].model);
    REQUIRE(b.points[i].n_agents == a.points[i].n_agents);
    const double hi = std::max(a.points[i].mean_s, b.points[i].mean_s);
    REQUIRE(std::abs(a.points[i].mean_s - b.points[i].mean_s) / hi < 0.10);
  }
}
