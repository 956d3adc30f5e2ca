#pragma once

#include "ver/rng.hpp"
#include "ver/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ver {

/// Per-step simulation latency: base * env_scale * episode_scale * jitter
/// * action_multiplier. episode_scale is resampled exactly once per episode,
/// everything else per step. All factors are strictly positive.
struct LatencyModel {
  bool enabled = false;
  Scalar base = 0.002;
  Scalar action_sigma = 0.0;   // lognormal sigma, per-step jitter
  Scalar episode_sigma = 0.0;  // lognormal sigma, per-episode multiplier
  std::vector<Scalar> action_multipliers;  // optional, per discrete action
  std::vector<Scalar> env_scales;          // optional, per env index
};

enum class TaskId { DelayedCue, Reach2D, LatencyOnly };

TaskId task_from_string(const std::string& name);
std::string to_string(TaskId id);

struct TaskSpec {
  TaskId task = TaskId::DelayedCue;

  // DelayedCue
  int horizon = 8;

  // Reach2D
  int max_steps = 32;
  Scalar step_size = 0.1;
  Scalar goal_radius = 0.05;
  Scalar step_penalty = 0.01;

  // LatencyOnly
  int episode_len = 16;

  LatencyModel latency;

  int obs_dim() const;
  ActionKind action_kind() const;
  int num_actions() const;  // discrete tasks
  int action_dim() const;   // continuous tasks
};

struct StepResult {
  Vector observation;
  Scalar reward = 0;
  bool done = false;
  Scalar latency_spent = 0;
};

/// One synthetic environment instance. Owned by exactly one worker; all
/// randomness is counter-based on (seed, env_index, episode_index) so results
/// are independent of scheduling order. The env never sleeps itself; it
/// reports latency_spent and the worker decides how to spend it.
class Env {
 public:
  Env(TaskSpec spec, int env_index);

  /// Starts episode 0 of a fresh seed stream.
  Vector reset(std::uint64_t seed);

  /// Advances to the next episode after a done step.
  Vector reset_episode();

  /// Steps the current episode. Throws ProtocolError if the episode already
  /// finished without a reset.
  StepResult step(const Action& action);

  bool episode_done() const { return done_; }
  std::int64_t episode_index() const { return episode_; }
  int step_in_episode() const { return t_; }
  Scalar episode_scale() const { return episode_scale_; }
  const TaskSpec& spec() const { return spec_; }
  int env_index() const { return env_index_; }

 private:
  Vector observe() const;
  void sample_episode();
  Scalar sample_latency(const Action& action);

  TaskSpec spec_;
  int env_index_;
  std::uint64_t seed_ = 0;
  std::int64_t episode_ = -1;
  int t_ = 0;
  bool done_ = true;
  Scalar episode_scale_ = 1.0;
  CounterRng ep_rng_;  // stream for the current episode

  // task state
  Scalar cue_ = 1.0;                   // DelayedCue
  Eigen::Vector2d agent_, goal_;       // Reach2D
};

/// Expected undiscounted return of the optimal policy, the sample-efficiency
/// yardstick. For Reach2D this averages the shortest-path return over
/// `episodes` sampled episodes of the given seed stream.
Scalar optimal_return(const TaskSpec& spec, std::uint64_t seed = 0, int episodes = 256);

}  // namespace ver
