#pragma once

#include "ver/config.hpp"
#include "ver/metrics.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ver {

/// Stderr logging gated by the VER_LOG_LEVEL env var (quiet|info|debug).
int log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

struct UpdateEvent {
  int update = 0;
  int rank = 0;
  long steps_consumed = 0;
  TrainStats train;
  TimingRecord timing;
  Scalar mean_return = 0;  // rolling window over recent episodes
  int episodes = 0;        // completed this update
};

struct TrainResult {
  int updates = 0;
  long steps = 0;
  SpsStats sps;
  Scalar final_mean_return = 0;
  std::vector<Scalar> mean_return_curve;  // one point per update
  std::vector<double> collect_times;
  std::vector<double> learn_times;
  std::vector<std::vector<int>> per_env_counts;  // one per rollout (rank 0)
  std::vector<int> deficits;
};

/// Runs one full training job per the config (virtual or real clock, single
/// or multi replica, overlapped or not). Writes metrics/checkpoint files when
/// out_prefix is non-empty.
TrainResult run_training(const RunConfig& cfg, const std::string& out_prefix = "",
                         const std::function<void(const UpdateEvent&)>& on_update = {});

struct BenchRow {
  std::string regime;
  std::uint64_t seed = 0;
  int replicas = 1;
  double mean_sps = 0;
  double max_sps = 0;
  double mean_over_max = 0;
  double speedup_vs_sync = 0;  // filled when a sync row with the same seed exists
  int env_count_min = 0;
  double env_count_mean = 0;
  int env_count_max = 0;
};

/// Runs every regime under identical seeds and latency streams; returns one
/// row per (regime, seed) and writes CSV when csv is non-null.
std::vector<BenchRow> run_bench(const RunConfig& base, const std::vector<std::string>& regimes,
                                const std::vector<std::uint64_t>& seeds, std::ostream* csv);

/// Return-vs-steps curves per regime per seed as CSV
/// (columns: steps, seed, regime, mean_return).
void run_compare(const RunConfig& base, const std::vector<std::string>& regimes,
                 const std::vector<std::uint64_t>& seeds, std::ostream& csv);

/// Re-runs a dumped rollout trace through splitting, packing and one learner
/// update; prints what it finds. Returns a process exit code.
int run_replay(const RunConfig& cfg, const std::string& trace_path, std::ostream& out);

void save_checkpoint(const std::string& path, const Learner& learner);
struct Checkpoint {
  PolicyParams params;
  AdamState adam;
  Scalar alpha = 0;
  long consumed_steps = 0;
  long update_index = 0;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ver
