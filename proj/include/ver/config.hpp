#pragma once

#include "ver/distributed.hpp"
#include "ver/envsim.hpp"
#include "ver/learner.hpp"
#include "ver/runtime.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ver {

/// Full run configuration. Defaults reproduce the reference hyperparameters
/// (lr 2.5e-4 cosine, 3 epochs, 2 mini-batches, clip 0.2, gamma 0.99,
/// lambda 0.95, entropy coefficient 1e-3 in [1e-4, 1], target 0, IS cap 1.0,
/// T=128, N=16).
struct RunConfig {
  // [run]
  std::string regime = "ver";
  bool overlap = false;
  int replicas = 1;
  std::uint64_t seed = 1;
  long total_steps = 2000000;
  int updates = 0;  // 0: derive from total_steps / (T*N)
  std::string clock = "virtual";
  std::string out_dir;
  bool dump_rollouts = false;
  int checkpoint_every = 0;

  // [env]
  std::string task = "delayed_cue";
  int horizon = 8;
  int max_steps = 32;
  double step_size = 0.1;
  double goal_radius = 0.05;
  double step_penalty = 0.01;
  int episode_len = 16;

  // [env.latency]
  bool latency_enabled = false;
  double latency_base = 0.002;
  double action_sigma = 0.5;
  double episode_sigma = 0.75;
  std::vector<double> action_multipliers;
  std::vector<double> env_scales;
  std::vector<double> replica_scales;

  // [rollout]
  int T = 128;
  int N = 16;
  int envs_per_worker = 1;
  int inference_workers = 1;

  // [batching]
  int min_requests = 1;
  int max_requests = 0;  // 0: N
  double max_wait = 0.002;
  double inference_base = 2e-4;      // virtual-clock service model
  double inference_per_item = 1e-5;

  // [ppo]
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  int epochs = 3;
  int minibatches = 2;
  double value_loss_coef = 0.5;
  double is_cap = 1.0;

  // [entropy]
  double entropy_initial = 1e-3;
  double entropy_lower = 1e-4;
  double entropy_upper = 1.0;
  double entropy_target = 0.0;
  double entropy_lr = 2.5e-4;

  // [optim]
  double lr = 2.5e-4;

  // [model]
  int hidden = 64;
  int encoder = 64;

  // [distributed]
  std::string preempt = "optimal";
  double preempt_fraction = 0.6;
  bool per_replica_budget = false;

  // [bench]
  int bench_rollouts = 100;
  int bench_warmup = 5;
  bool bench_learn = true;

  int derived_updates() const {
    if (updates > 0) return updates;
    const long per = static_cast<long>(T) * N * replicas;
    return static_cast<int>((total_steps + per - 1) / per);
  }
};

/// Minimal TOML-style reader covering the config schema: [section] and
/// [a.b] headers, key = string | bool | number | array, # comments.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

/// Every violated constraint, one message each; empty means valid.
std::vector<std::string> validate(const RunConfig& cfg);
void validate_or_throw(const RunConfig& cfg);

TaskSpec to_task_spec(const RunConfig& cfg);
ModelConfig to_model_config(const RunConfig& cfg);
RuntimeConfig to_runtime_config(const RunConfig& cfg);
PPOConfig to_ppo_config(const RunConfig& cfg);
EntropyController to_entropy_controller(const RunConfig& cfg);
CosineSchedule to_schedule(const RunConfig& cfg);
DistributedConfig to_distributed_config(const RunConfig& cfg);

}  // namespace ver
