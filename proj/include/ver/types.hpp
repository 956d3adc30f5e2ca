#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ver {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

enum class ActionKind { Discrete, Continuous };

/// Either a discrete index or a continuous vector, depending on the task.
struct Action {
  ActionKind kind = ActionKind::Discrete;
  int index = 0;
  Vector values;

  static Action discrete(int i) {
    Action a;
    a.kind = ActionKind::Discrete;
    a.index = i;
    return a;
  }
  static Action continuous(Vector v) {
    Action a;
    a.kind = ActionKind::Continuous;
    a.values = std::move(v);
    return a;
  }
};

/// Raised when a caller breaks a module contract (stepping a done episode,
/// double carryover, closing an empty buffer, ...).
class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// One completed transition as stored in a rollout.
/// `h_before` is the recurrent state prior to consuming `obs`; it is only
/// persisted when the step starts a new sequence.
struct EnvStepRecord {
  int env_index = 0;
  std::int64_t episode_index = 0;
  int step_in_episode = 0;
  Vector obs;
  Action action;
  Scalar log_prob = 0;
  Scalar value = 0;
  Scalar reward = 0;
  bool done = false;
  Scalar latency = 0;
  Vector h_before;
  std::uint64_t snapshot_version = 0;
};

}  // namespace ver
