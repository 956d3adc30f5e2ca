#pragma once

#include "ver/learner.hpp"
#include "ver/rollout.hpp"
#include "ver/runtime.hpp"

#include <nlohmann/json_fwd.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace ver {

/// Accumulates per-env reward sums across rollouts and emits the return of
/// every episode that completes. Replayed (backfilled) steps are skipped.
class ReturnTracker {
 public:
  explicit ReturnTracker(int num_envs) : run_sum_(num_envs, 0.0) {}

  std::vector<Scalar> feed(const RolloutView& view) {
    std::vector<Scalar> out;
    for (int i = 0; i < view.size(); ++i) {
      if (view.replayed[i]) continue;
      const int e = view.env_index[i];
      run_sum_[e] += view.reward[i];
      if (view.done[i]) {
        out.push_back(run_sum_[e]);
        run_sum_[e] = 0.0;
      }
    }
    return out;
  }

 private:
  std::vector<Scalar> run_sum_;
};

/// Mean/max throughput over windows (one window per collect+learn cycle).
struct SpsStats {
  long total_steps = 0;
  double total_time = 0;
  double best = 0;

  void add_window(long steps, double seconds) {
    total_steps += steps;
    total_time += seconds;
    if (seconds > 0) best = std::max(best, steps / seconds);
  }
  double mean_sps() const { return total_time > 0 ? total_steps / total_time : 0.0; }
  double max_sps() const { return best; }
};

class JsonlWriter {
 public:
  JsonlWriter() = default;
  explicit JsonlWriter(const std::string& path);
  bool is_open() const { return out_.is_open(); }
  void write(const nlohmann::json& j);

 private:
  std::ofstream out_;
};

nlohmann::json to_json(const TimingRecord& rec);
nlohmann::json to_json(const TrainStats& st);

}  // namespace ver
