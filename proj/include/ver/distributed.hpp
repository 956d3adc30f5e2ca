#pragma once

#include "ver/learner.hpp"
#include "ver/runtime.hpp"
#include "ver/types.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace ver {

/// Predicts collection time from the previous rollout's mean per-env step
/// times: env i yields a step every step_times[i] seconds, so Time(S) is the
/// S-th smallest element of the merged arithmetic progressions {k*tau_i}.
struct PreemptionEstimator {
  Scalar learn_time = 0;            // LT, seconds, measured last iteration
  std::vector<Scalar> step_times;   // tau_i > 0, one per env across the group
  long max_steps = 0;               // S_max = T * N * replicas
};

/// Counting binary search over time, snapped to an exact member of the merged
/// progression. Throws for S outside [0, S_max].
Scalar estimate_time(const PreemptionEstimator& model, long steps);

/// argmax over S in [1, S_max] of S / (Time(S) + LT), exact scan, ties -> smallest S.
long optimal_preempt_steps(const PreemptionEstimator& model);

enum class PreemptMode { None, Optimal, FixedFraction };
PreemptMode preempt_from_string(const std::string& name);
std::string to_string(PreemptMode m);

/// Generation barrier that can be aborted: a failing replica wakes everyone
/// instead of leaving them stranded mid-AllReduce.
class SyncBarrier {
 public:
  explicit SyncBarrier(int n) : n_(n) {}

  void arrive_and_wait() {
    std::unique_lock lk(mu_);
    if (aborted_) throw ProtocolError("barrier aborted: replica failure");
    const long gen = generation_;
    if (++count_ == n_) {
      count_ = 0;
      ++generation_;
      cv_.notify_all();
      return;
    }
    cv_.wait(lk, [&] { return generation_ != gen || aborted_; });
    if (generation_ == gen && aborted_) {
      throw ProtocolError("barrier aborted: replica failure");
    }
  }

  void abort() {
    {
      std::lock_guard lk(mu_);
      aborted_ = true;
    }
    cv_.notify_all();
  }

 private:
  int n_;
  std::mutex mu_;
  std::condition_variable cv_;
  int count_ = 0;
  long generation_ = 0;
  bool aborted_ = false;
};

/// In-process AllReduce: rank 0 averages in rank order (deterministic), all
/// replicas leave with the identical element-wise mean.
class AllReduce {
 public:
  explicit AllReduce(int replicas);
  void average(int rank, std::vector<Matrix>& grads);
  Scalar average_scalar(int rank, Scalar value);
  void abort() { barrier_.abort(); }
  int replicas() const { return n_; }

 private:
  int n_;
  std::vector<std::vector<Matrix>*> slots_;
  std::vector<Matrix> result_;
  std::vector<Scalar> scalar_slots_;
  Scalar scalar_result_ = 0;
  SyncBarrier barrier_;
};

/// Joint step counting: once the group has committed `threshold` steps the
/// coordinator force-closes every replica's rollout.
class PreemptCoordinator {
 public:
  explicit PreemptCoordinator(int replicas) : drivers_(replicas, nullptr) {}

  void attach(int rank, ThreadedDriver* driver) { drivers_[rank] = driver; }

  /// threshold <= 0 disables preemption for the iteration.
  void start_iteration(long threshold) {
    count_.store(0);
    fired_.store(false);
    threshold_.store(threshold);
  }

  void add_steps(long n) {
    if (threshold_.load() <= 0) return;
    const long c = count_.fetch_add(n) + n;
    if (c >= threshold_.load() && !fired_.exchange(true)) {
      for (auto* d : drivers_) {
        if (d) d->request_force_close();
      }
    }
  }

  long count() const { return count_.load(); }

 private:
  std::vector<ThreadedDriver*> drivers_;
  std::atomic<long> count_{0};
  std::atomic<long> threshold_{0};
  std::atomic<bool> fired_{false};
};

struct DistributedConfig {
  int replicas = 1;
  PreemptMode preempt = PreemptMode::Optimal;
  double preempt_fraction = 0.6;     // DD-PPO style baseline
  bool per_replica_budget = false;   // ablation: count steps per replica
  std::vector<Scalar> replica_latency_scales;  // per-replica env slowdown
};

struct IterationResult {
  int iteration = 0;
  int rank = 0;
  TimingRecord timing;
  TrainStats train;
  int deficit = 0;
  int stale_steps = 0;
  long preempt_threshold = 0;
  std::vector<Scalar> episode_returns;  // episodes completed this iteration
};

/// Decentralized replicas as threads: each owns a full env/driver/learner
/// stack; they meet only at the gradient AllReduce and the shared preemption
/// counter. Parameters stay bitwise identical across replicas.
class ReplicaGroup {
 public:
  using Callback = std::function<void(const IterationResult&)>;

  ReplicaGroup(const RuntimeConfig& runtime, const PPOConfig& ppo,
               const EntropyController& entropy, const CosineSchedule& schedule,
               const DistributedConfig& dist, std::uint64_t param_seed);

  /// Runs `iterations` collect+learn cycles on every replica. The callback is
  /// invoked from replica threads (serialize externally if needed).
  void train(int iterations, const Callback& cb);

  Scalar param_divergence() const;
  const Learner& learner(int rank) const { return *learners_[rank]; }
  Scalar alpha_divergence() const;

 private:
  void replica_main(int rank, int iterations, const Callback& cb);
  void abort_all(const std::string& why);

  RuntimeConfig runtime_;
  PPOConfig ppo_;
  DistributedConfig dist_;
  std::vector<std::unique_ptr<ThreadedDriver>> drivers_;
  std::vector<std::unique_ptr<Learner>> learners_;
  std::vector<RolloutView> prev_views_;
  std::vector<std::uint64_t> versions_;
  AllReduce allreduce_;
  PreemptCoordinator coordinator_;
  std::unique_ptr<SyncBarrier> phase_barrier_;

  // iteration bookkeeping shared across replicas (rank 0 aggregates between barriers)
  std::vector<double> learn_times_;
  std::vector<std::vector<Scalar>> tau_estimates_;
  std::vector<long> fresh_counts_;
  long global_consumed_ = 0;
  long global_pre_ = 0;
  long next_threshold_ = 0;
  std::atomic<int> finished_natural_{0};
  std::atomic<long> per_replica_threshold_{0};
  std::unique_ptr<std::atomic<long>[]> own_counts_;
  std::atomic<bool> abort_{false};
  std::string abort_reason_;
  std::mutex abort_mu_;
};

}  // namespace ver
