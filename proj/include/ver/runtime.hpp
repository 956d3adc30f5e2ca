#pragma once

#include "ver/envsim.hpp"
#include "ver/nn.hpp"
#include "ver/rollout.hpp"
#include "ver/types.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

namespace ver {

enum class Regime { Sync, NoVer, Ver };
Regime regime_from_string(const std::string& name);
std::string to_string(Regime r);

/// One environment step result submitted for inference. The completed-step
/// fields describe the transition this request finishes; the obs_* fields
/// locate the observation being submitted (post-reset when done).
struct InferenceRequest {
  int env_index = 0;
  Vector observation;
  Scalar reward = 0;
  bool done = false;
  bool first = false;  // initial request after reset; completes nothing
  Scalar latency = 0;
  double arrival_time = 0;
  std::int64_t episode_index = 0;
  int step_in_episode = 0;
  std::int64_t obs_episode = 0;
  int obs_step = 0;
};

struct BatchingPolicy {
  int min_requests = 1;
  int max_requests = 0;  // 0 means N
  double max_wait = 0.002;
};

struct RuntimeConfig {
  int T = 128;
  int N = 16;
  Regime regime = Regime::Ver;
  bool overlap = false;
  BatchingPolicy batching;
  int envs_per_worker = 1;
  int inference_workers = 1;
  std::uint64_t seed = 1;
  TaskSpec task;
  ModelConfig model;
  // virtual-clock inference service time: base + per_item * batch
  double inference_base = 2e-4;
  double inference_per_item = 1e-5;
  double watchdog_timeout = 60.0;  // real clock, seconds without progress

  RolloutMode rollout_mode() const {
    return regime == Regime::Ver ? RolloutMode::Variable : RolloutMode::Fixed;
  }
};

/// Per-rollout timing record (the JSONL external interface of this module).
struct TimingRecord {
  long rollout_index = 0;
  std::string regime;
  double wall_time = 0;  // collection
  double learn_time = 0;
  int steps = 0;
  int carryover_in = 0;
  int deficit = 0;
  std::vector<int> per_env_counts;
  std::vector<double> idle_times;
  std::vector<int> batch_sizes;  // inference batch sizes this rollout
  std::uint64_t snapshot_version = 0;
  double collect_start = 0, collect_end = 0;
  double learn_start = 0, learn_end = 0;
};

InferenceRequest initial_request(Env& env, std::uint64_t seed);
InferenceRequest apply_action(Env& env, const Action& action);

/// The inference-worker state machine shared by both drivers: completes
/// pending transitions, commits them through the rollout buffer's single
/// writer gate, runs batched forwards with the frozen snapshot and hands
/// actions back. Not thread-safe by itself; the threaded driver serializes
/// access through its commit gate.
class InferenceEngine {
 public:
  struct Dispatch {
    int env_index;
    Action action;
  };
  struct BatchResult {
    std::vector<Dispatch> dispatches;
    int new_commits = 0;
    bool closed_now = false;
  };

  InferenceEngine(const RuntimeConfig& cfg, SnapshotPtr snapshot);

  void set_snapshot(SnapshotPtr snapshot);
  const SnapshotPtr& snapshot() const { return snapshot_; }

  /// Opens the next rollout (consuming carryover) and flushes parked
  /// observations through the new snapshot.
  BatchResult begin_rollout();

  BatchResult process_batch(const std::vector<InferenceRequest>& reqs, double now);

  bool rollout_done() const { return !buffer_.open(); }
  void force_close() { buffer_.force_close(); }

  /// Records bootstrap values for truncated tails; call at close, before
  /// building the view.
  void finalize_bootstraps();
  RolloutView close(double collect_wall_time);

  int committed() const { return buffer_.committed(); }
  int capacity() const { return buffer_.capacity(); }
  int carryover_count() const { return buffer_.carryover_count(); }
  /// Envs that can still receive actions this rollout.
  int active_envs() const;
  const RuntimeConfig& config() const { return cfg_; }

 private:
  struct PendingStep {
    Vector obs;
    Action action;
    Scalar log_prob = 0;
    Scalar value = 0;
    Vector h_before;
    std::int64_t episode = 0;
    int t = 0;
    std::uint64_t version = 0;
  };
  struct EnvSlot {
    RowVector h;
    std::optional<PendingStep> pending;
    std::optional<InferenceRequest> parked;
    bool paused = false;
  };

  void complete_pending(const InferenceRequest& req, BatchResult& out);
  void compute_actions(const std::vector<const InferenceRequest*>& needs, BatchResult& out);

  RuntimeConfig cfg_;
  SnapshotPtr snapshot_;
  RolloutBuffer buffer_;
  std::vector<EnvSlot> envs_;
};

/// Deterministic discrete-event simulation of the whole worker architecture
/// on a virtual clock: env workers are serial resources, the inference worker
/// batches per the BatchingPolicy and spends a configurable service time.
/// With a fixed seed, reruns produce identical rollouts regardless of host
/// scheduling (there are no threads).
class VirtualDriver {
 public:
  VirtualDriver(const RuntimeConfig& cfg, SnapshotPtr snapshot);

  void set_snapshot(SnapshotPtr snapshot) { engine_.set_snapshot(std::move(snapshot)); }
  std::pair<RolloutView, TimingRecord> run_rollout();
  double now() const { return now_; }
  InferenceEngine& engine() { return engine_; }

 private:
  struct Event {
    double time;
    long seq;
    int kind;  // 0 step-complete, 1 infer-done, 2 batch-timeout
    int index; // env for step-complete
    bool operator>(const Event& o) const {
      return time != o.time ? time > o.time : seq > o.seq;
    }
  };

  void schedule(double t, int kind, int index);
  void submit_request(InferenceRequest req);
  void maybe_start_batch();
  void dispatch(const std::vector<InferenceEngine::Dispatch>& ds);
  int effective_min() const;

  void start_next_job(int worker);

  RuntimeConfig cfg_;
  InferenceEngine engine_;
  std::vector<Env> envs_;
  std::vector<int> owner_;           // env -> worker
  std::vector<char> worker_running_; // worker has a job in flight
  std::vector<std::deque<std::pair<int, Action>>> worker_queue_;
  std::vector<std::optional<InferenceRequest>> inflight_;
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events_;
  std::vector<InferenceRequest> pending_;
  std::vector<InferenceRequest> infer_batch_;
  std::vector<int> batch_sizes_;
  bool infer_busy_ = false;
  double now_ = 0;
  long seq_ = 0;
  long rollout_index_ = 0;
  bool started_ = false;
  std::vector<double> idle_;
};

/// Real-clock drivers: one thread per environment worker (sleeping out the
/// simulated latency), one or more inference threads behind a commit gate,
/// the learner runs on the caller's thread between rollouts (or concurrently
/// in overlapped mode).
class ThreadedDriver {
 public:
  ThreadedDriver(const RuntimeConfig& cfg, SnapshotPtr snapshot);
  ~ThreadedDriver();

  ThreadedDriver(const ThreadedDriver&) = delete;
  ThreadedDriver& operator=(const ThreadedDriver&) = delete;

  /// Swaps the snapshot and opens the next rollout (returns immediately).
  void request_begin(SnapshotPtr snapshot);
  /// Blocks until the current rollout closes; returns the view + timing.
  std::pair<RolloutView, TimingRecord> wait_rollout();

  /// Preemption: close the current rollout as soon as possible.
  void request_force_close();

  /// Called by the inference thread after each batch with the number of new
  /// commits; lets a coordinator count global steps. May call
  /// request_force_close from within.
  std::function<void(int)> on_commits;

  long total_commits() const { return total_commits_.load(); }

 private:
  void env_worker_main(int worker);
  void inference_main(int worker);
  void deliver(const std::vector<InferenceEngine::Dispatch>& ds);

  RuntimeConfig cfg_;
  InferenceEngine engine_;
  std::vector<Env> envs_;
  std::vector<std::vector<int>> worker_envs_;

  // per-env action mailboxes, one slot each (single producer, single consumer)
  struct Mailbox {
    std::optional<Action> action;
  };
  std::vector<Mailbox> mailbox_;
  std::mutex mail_mu_;
  std::condition_variable mail_cv_;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<InferenceRequest> queue_;

  std::mutex gate_mu_;  // commit gate: serializes engine access
  std::condition_variable gate_cv_;
  enum class Phase { Idle, BeginRequested, Collecting, Closed };
  Phase phase_ = Phase::Idle;       // authoritative, guarded by gate_mu_
  std::atomic<int> phase_hint_{0};  // lock-free mirror for batching decisions
  std::atomic<int> active_hint_{1 << 30};
  SnapshotPtr next_snapshot_;
  std::optional<std::pair<RolloutView, TimingRecord>> finished_;
  std::atomic<bool> force_close_{false};
  std::atomic<bool> shutdown_{false};
  std::atomic<long> total_commits_{0};
  std::chrono::steady_clock::time_point t0_;
  double collect_start_ = 0;
  long rollout_index_ = 0;
  std::vector<double> idle_;
  std::vector<int> batch_sizes_;

  std::vector<std::thread> env_threads_;
  std::vector<std::thread> infer_threads_;
};

}  // namespace ver
