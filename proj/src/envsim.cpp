#include "ver/envsim.hpp"

#include <algorithm>
#include <cmath>

namespace ver {

namespace {
// substream ids within an episode stream
constexpr std::uint64_t kTaskStream = 1;
constexpr std::uint64_t kEpisodeScaleStream = 2;
constexpr std::uint64_t kLatencyStream = 3;
}  // namespace

TaskId task_from_string(const std::string& name) {
  if (name == "delayed_cue") return TaskId::DelayedCue;
  if (name == "reach2d") return TaskId::Reach2D;
  if (name == "latency_only") return TaskId::LatencyOnly;
  throw ConfigError("unknown task id: " + name);
}

std::string to_string(TaskId id) {
  switch (id) {
    case TaskId::DelayedCue: return "delayed_cue";
    case TaskId::Reach2D: return "reach2d";
    case TaskId::LatencyOnly: return "latency_only";
  }
  return "?";
}

int TaskSpec::obs_dim() const {
  switch (task) {
    case TaskId::DelayedCue: return 2;   // cue slot, progress
    case TaskId::Reach2D: return 4;      // agent xy, goal xy
    case TaskId::LatencyOnly: return 1;  // constant
  }
  return 0;
}

ActionKind TaskSpec::action_kind() const {
  return task == TaskId::Reach2D ? ActionKind::Continuous : ActionKind::Discrete;
}

int TaskSpec::num_actions() const {
  switch (task) {
    case TaskId::DelayedCue: return 2;
    case TaskId::LatencyOnly: return 2;
    default: return 0;
  }
}

int TaskSpec::action_dim() const { return task == TaskId::Reach2D ? 2 : 0; }

Env::Env(TaskSpec spec, int env_index) : spec_(std::move(spec)), env_index_(env_index) {}

Vector Env::reset(std::uint64_t seed) {
  seed_ = seed;
  episode_ = -1;
  return reset_episode();
}

Vector Env::reset_episode() {
  ++episode_;
  t_ = 0;
  done_ = false;
  ep_rng_ = CounterRng(seed_).stream(static_cast<std::uint64_t>(env_index_),
                                     static_cast<std::uint64_t>(episode_));
  sample_episode();
  return observe();
}

void Env::sample_episode() {
  CounterRng task_rng = ep_rng_.stream(kTaskStream);
  switch (spec_.task) {
    case TaskId::DelayedCue:
      cue_ = task_rng.uniform() < 0.5 ? -1.0 : 1.0;
      break;
    case TaskId::Reach2D: {
      agent_ << task_rng.uniform(-1, 1), task_rng.uniform(-1, 1);
      goal_ << task_rng.uniform(-1, 1), task_rng.uniform(-1, 1);
      while ((goal_ - agent_).norm() <= spec_.goal_radius) {
        goal_ << task_rng.uniform(-1, 1), task_rng.uniform(-1, 1);
      }
      break;
    }
    case TaskId::LatencyOnly:
      break;
  }
  episode_scale_ = 1.0;
  if (spec_.latency.enabled && spec_.latency.episode_sigma > 0) {
    episode_scale_ = ep_rng_.stream(kEpisodeScaleStream).lognormal(spec_.latency.episode_sigma);
  }
}

Vector Env::observe() const {
  Vector obs(spec_.obs_dim());
  switch (spec_.task) {
    case TaskId::DelayedCue:
      obs << (t_ == 0 ? cue_ : 0.0),
          spec_.horizon > 1 ? static_cast<Scalar>(t_) / (spec_.horizon - 1) : 0.0;
      break;
    case TaskId::Reach2D:
      obs << agent_.x(), agent_.y(), goal_.x(), goal_.y();
      break;
    case TaskId::LatencyOnly:
      obs << 1.0;
      break;
  }
  return obs;
}

Scalar Env::sample_latency(const Action& action) {
  const LatencyModel& lm = spec_.latency;
  if (!lm.enabled) return 0.0;
  Scalar v = lm.base * episode_scale_;
  if (static_cast<std::size_t>(env_index_) < lm.env_scales.size()) {
    v *= lm.env_scales[env_index_];
  }
  if (lm.action_sigma > 0) {
    v *= ep_rng_.stream(kLatencyStream, static_cast<std::uint64_t>(t_)).lognormal(lm.action_sigma);
  }
  if (action.kind == ActionKind::Discrete &&
      static_cast<std::size_t>(action.index) < lm.action_multipliers.size()) {
    v *= lm.action_multipliers[action.index];
  }
  return v;
}

StepResult Env::step(const Action& action) {
  if (done_) {
    throw ProtocolError("env_step: episode already done, reset required (env " +
                        std::to_string(env_index_) + ")");
  }
  StepResult out;
  out.latency_spent = sample_latency(action);

  switch (spec_.task) {
    case TaskId::DelayedCue: {
      const bool last = (t_ == spec_.horizon - 1);
      if (last) {
        const int want = cue_ > 0 ? 1 : 0;
        out.reward = (action.index == want) ? 1.0 : 0.0;
        done_ = true;
      }
      ++t_;
      break;
    }
    case TaskId::Reach2D: {
      Eigen::Vector2d a = Eigen::Vector2d::Zero();
      if (action.values.size() >= 2) a << action.values[0], action.values[1];
      const Scalar n = a.norm();
      if (n > spec_.step_size) a *= spec_.step_size / n;
      agent_ += a;
      agent_ = agent_.cwiseMax(-1.0).cwiseMin(1.0);
      ++t_;
      if ((agent_ - goal_).norm() <= spec_.goal_radius) {
        out.reward = 1.0;
        done_ = true;
      } else {
        out.reward = -spec_.step_penalty;
        if (t_ >= spec_.max_steps) done_ = true;
      }
      break;
    }
    case TaskId::LatencyOnly: {
      ++t_;
      out.reward = 0.0;
      if (t_ >= spec_.episode_len) done_ = true;
      break;
    }
  }

  out.done = done_;
  out.observation = observe();
  return out;
}

Scalar optimal_return(const TaskSpec& spec, std::uint64_t seed, int episodes) {
  switch (spec.task) {
    case TaskId::DelayedCue:
      return 1.0;  // the cue can always be recalled
    case TaskId::LatencyOnly:
      return 0.0;
    case TaskId::Reach2D: {
      // Straight-line shortest path: k steps of step_size until within the
      // goal radius, a per-step penalty on every non-terminal step.
      Scalar total = 0;
      Env env(spec, 0);
      Vector obs = env.reset(seed);
      for (int e = 0; e < episodes; ++e) {
        if (e > 0) obs = env.reset_episode();
        const Eigen::Vector2d agent(obs[0], obs[1]);
        const Eigen::Vector2d goal(obs[2], obs[3]);
        const Scalar dist = (goal - agent).norm();
        int k = static_cast<int>(std::ceil((dist - spec.goal_radius) / spec.step_size - 1e-12));
        k = std::max(k, 1);
        if (k > spec.max_steps) {
          total += -spec.step_penalty * spec.max_steps;
        } else {
          total += 1.0 - spec.step_penalty * (k - 1);
        }
      }
      return total / episodes;
    }
  }
  throw ProtocolError("optimal_return: unknown task");
}

}  // namespace ver
