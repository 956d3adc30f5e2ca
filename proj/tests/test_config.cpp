#include <doctest.h>

#include "ver/bench.hpp"
#include "ver/config.hpp"

#include <algorithm>
#include <sstream>

using namespace ver;

TEST_CASE("config parses sections, numbers, strings, bools and arrays") {
  const std::string text = R"(
# a comment
[run]
regime = "sync"      # trailing comment
seed = 42
overlap = false

[env]
task = "latency_only"
episode_len = 4

[env.latency]
enabled = true
base = 0.004
env_scales = [1.0, 2.0, 1.5]

[rollout]
T = 16
N = 8
)";
  RunConfig c = parse_config(text);
  CHECK(c.regime == "sync");
  CHECK(c.seed == 42);
  CHECK(c.task == "latency_only");
  CHECK(c.episode_len == 4);
  CHECK(c.latency_enabled);
  CHECK(c.latency_base == doctest::Approx(0.004));
  CHECK(c.env_scales == std::vector<double>{1.0, 2.0, 1.5});
  CHECK(c.T == 16);
  CHECK(c.N == 8);
  // untouched keys keep the reference defaults
  CHECK(c.gamma == doctest::Approx(0.99));
  CHECK(c.gae_lambda == doctest::Approx(0.95));
  CHECK(c.clip == doctest::Approx(0.2));
  CHECK(c.epochs == 3);
  CHECK(c.minibatches == 2);
  CHECK(c.lr == doctest::Approx(2.5e-4));
  CHECK(c.entropy_initial == doctest::Approx(1e-3));
  CHECK(c.entropy_target == doctest::Approx(0.0));
  CHECK(c.is_cap == doctest::Approx(1.0));
}

TEST_CASE("config round-trip: parse(serialize(x)) == x") {
  RunConfig c;
  c.task = "reach2d";
  c.regime = "nover";
  c.T = 32;
  c.N = 4;
  c.env_scales = {1.0, 2.0, 3.0, 4.0};
  c.latency_enabled = true;
  c.seed = 99;
  c.out_dir = "runs/x";
  c.overlap = false;
  const std::string s1 = serialize_config(c);
  RunConfig d = parse_config(s1);
  CHECK(serialize_config(d) == s1);
}

TEST_CASE("missing required key is named in the error") {
  try {
    parse_config("[run]\nseed = 1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("env.task") != std::string::npos);
  }
}

TEST_CASE("unknown keys are rejected by name") {
  try {
    parse_config("[env]\ntask = \"reach2d\"\ntypo_key = 3\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("env.typo_key") != std::string::npos);
  }
}

TEST_CASE("validation lists every violated constraint") {
  RunConfig c;
  c.task = "delayed_cue";
  c.T = 10;
  c.N = 3;
  c.minibatches = 7;   // does not divide 30
  c.gamma = 1.5;       // out of range
  c.clip = -1;         // non-positive
  c.regime = "bogus";  // unknown
  auto bad = validate(c);
  auto has = [&](const std::string& needle) {
    return std::any_of(bad.begin(), bad.end(), [&](const std::string& m) {
      return m.find(needle) != std::string::npos;
    });
  };
  CHECK(bad.size() >= 4);
  CHECK(has("minibatches"));
  CHECK(has("gamma"));
  CHECK(has("clip"));
  CHECK(has("regime"));
}

TEST_CASE("overlap and replicas require the real clock") {
  RunConfig c;
  c.task = "latency_only";
  c.overlap = true;
  c.clock = "virtual";
  CHECK(!validate(c).empty());
  c.overlap = false;
  c.replicas = 2;
  CHECK(!validate(c).empty());
  c.clock = "real";
  CHECK(validate(c).empty());
}

TEST_CASE("training on the virtual clock produces metrics and exact rollouts") {
  RunConfig cfg;
  cfg.task = "latency_only";
  cfg.episode_len = 8;
  cfg.latency_enabled = true;
  cfg.latency_base = 0.001;
  cfg.action_sigma = 0.5;
  cfg.T = 8;
  cfg.N = 4;
  cfg.hidden = 8;
  cfg.encoder = 8;
  cfg.updates = 3;
  cfg.total_steps = 10000;

  TrainResult r = run_training(cfg);
  CHECK(r.updates == 3);
  CHECK(r.steps == 3 * 32);
  CHECK(r.sps.mean_sps() > 0);
}

TEST_CASE("checkpoint save/load round trip through the bench layer") {
  RunConfig cfg;
  cfg.task = "delayed_cue";
  cfg.horizon = 4;
  cfg.T = 8;
  cfg.N = 2;
  cfg.hidden = 8;
  cfg.encoder = 8;
  cfg.updates = 2;

  ModelConfig mc = to_model_config(cfg);
  PolicyParams p = PolicyParams::init(mc, 1);
  Learner learner(p, to_ppo_config(cfg), to_entropy_controller(cfg), to_schedule(cfg), 3);
  learner.set_consumed_steps(512);
  learner.set_update_index(7);
  learner.entropy().alpha = 0.123;

  const std::string path = "/tmp/ver_test_ckpt.json";
  save_checkpoint(path, learner);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.consumed_steps == 512);
  CHECK(ck.update_index == 7);
  CHECK(ck.alpha == doctest::Approx(0.123));
  auto a = learner.params().tensors();
  auto b = ck.params.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK((*a[i].second - *b[i].second).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  }
}

TEST_CASE("replay reconstructs a dumped rollout and runs an update") {
  RunConfig cfg;
  cfg.task = "delayed_cue";
  cfg.horizon = 4;
  cfg.T = 8;
  cfg.N = 2;
  cfg.hidden = 8;
  cfg.encoder = 8;
  cfg.updates = 1;
  cfg.dump_rollouts = true;

  TrainResult r = run_training(cfg, "/tmp/ver_replay_test");
  REQUIRE(r.updates == 1);
  std::ostringstream out;
  const int code = run_replay(cfg, "/tmp/ver_replay_test_rollout_0.jsonl", out);
  CHECK(code == 0);
  CHECK(out.str().find("trace: 16 steps") != std::string::npos);
  CHECK(out.str().find("replayed update") != std::string::npos);
}

TEST_CASE("determinism: identical config and seed give identical curves") {
  RunConfig cfg;
  cfg.task = "delayed_cue";
  cfg.horizon = 4;
  cfg.regime = "sync";
  cfg.T = 8;
  cfg.N = 4;
  cfg.hidden = 8;
  cfg.encoder = 8;
  cfg.updates = 4;
  cfg.seed = 5;

  TrainResult a = run_training(cfg);
  TrainResult b = run_training(cfg);
  REQUIRE(a.mean_return_curve.size() == b.mean_return_curve.size());
  for (std::size_t i = 0; i < a.mean_return_curve.size(); ++i) {
    CHECK(a.mean_return_curve[i] == doctest::Approx(b.mean_return_curve[i]).epsilon(1e-12));
  }
}

TEST_CASE("bench fairness: all regimes see identical latency seed streams") {
  RunConfig cfg;
  cfg.task = "latency_only";
  cfg.episode_len = 8;
  cfg.latency_enabled = true;
  cfg.latency_base = 0.002;
  cfg.action_sigma = 0.4;
  cfg.T = 8;
  cfg.N = 4;
  cfg.hidden = 8;
  cfg.encoder = 8;
  cfg.bench_rollouts = 2;
  cfg.bench_warmup = 0;
  cfg.seed = 7;

  std::ostringstream csv;
  auto rows = run_bench(cfg, {"sync", "ver"}, {7}, &csv);
  REQUIRE(rows.size() == 2);
  // same seed appears in both rows; sync row carries speedup 1.0
  for (const auto& row : rows) CHECK(row.seed == 7);
  for (const auto& row : rows) {
    if (row.regime == "sync") CHECK(row.speedup_vs_sync == doctest::Approx(1.0));
  }
  CHECK(csv.str().find("regime,seed") != std::string::npos);
}

TEST_CASE("compare emits one curve row per update per regime and seed") {
  RunConfig cfg;
  cfg.task = "delayed_cue";
  cfg.horizon = 4;
  cfg.T = 8;
  cfg.N = 4;
  cfg.hidden = 8;
  cfg.encoder = 8;
  cfg.updates = 3;

  std::ostringstream csv;
  run_compare(cfg, {"sync", "ver"}, {1, 2}, csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "steps,seed,regime,mean_return");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3 * 2 * 2);
}
