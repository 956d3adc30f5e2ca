#pragma once

#include "ver/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

namespace ver {

enum class RolloutMode { Fixed, Variable };

/// One maximal run of steps sharing a recurrent-state lineage, bounded by
/// rollout start or episode start. `start_offset` indexes the view's
/// sequence-contiguous storage. When `skip` > 0 the descriptor is the tail of
/// a split sequence: its initial state must be recomputed by replaying `skip`
/// steps from `parent_start_offset` starting at h0 row `h0_index`.
struct SequenceDescriptor {
  int seq_id = 0;
  int env_index = 0;
  int length = 0;
  int start_offset = 0;
  int h0_index = -1;
  bool stale = false;
  int parent_start_offset = 0;
  int skip = 0;
};

/// Immutable, sequence-contiguous snapshot of one closed rollout.
/// advantage/returns are filled in by the learner after close and travel with
/// the view so stale backfill can reuse them verbatim.
struct RolloutView {
  int T = 0;
  int N = 0;
  ActionKind action_kind = ActionKind::Discrete;
  int obs_dim = 0;
  int act_dim = 0;
  int hidden_dim = 0;

  Matrix obs;                 // S x obs_dim
  Matrix act_cont;            // S x act_dim (continuous tasks)
  std::vector<int> act_disc;  // S (discrete tasks)
  Vector log_prob;
  Vector value;
  Vector reward;
  Vector latency;
  Vector advantage;
  Vector returns;
  std::vector<std::uint8_t> done;
  std::vector<std::uint8_t> stale;     // behavior snapshot lags the learner (IS metadata)
  std::vector<std::uint8_t> replayed;  // backfilled copy of older experience
  std::vector<int> env_index;
  std::vector<int> seq_of_slot;
  std::vector<std::int64_t> episode_index;
  std::vector<int> step_in_episode;
  std::vector<std::uint64_t> version;

  std::vector<SequenceDescriptor> seqs;
  Matrix h0;  // num_seqs x hidden_dim

  std::vector<int> per_env_counts;
  Vector env_bootstrap;  // V(next obs) for each env's truncated tail
  std::vector<std::uint8_t> env_bootstrap_valid;

  int deficit = 0;        // preempted capacity at close
  int stale_steps = 0;    // steps flagged stale
  int replayed_steps = 0; // backfilled steps (re-used, not new experience)
  std::uint64_t snapshot_version = 0;
  double collect_wall_time = 0;

  int size() const { return static_cast<int>(done.size()); }
  int fresh_steps() const { return size() - replayed_steps; }

  /// Marks every step whose producing snapshot differs from `learner_version`
  /// as stale (overlapped mode: the whole lagged rollout).
  void restale(std::uint64_t learner_version);
};

enum class AppendOutcome { Accepted, RolloutFull };

/// Preallocated storage for one rollout of experience. Commits arrive in
/// arrival order through a single writer; close_rollout() reorders them into
/// the sequence-contiguous view. In Variable mode the commit that reaches
/// T*N closes the buffer and later arrivals wait in per-env carryover slots;
/// in Fixed mode each env contributes exactly T steps.
class RolloutBuffer {
 public:
  struct Config {
    int T = 0;
    int N = 0;
    RolloutMode mode = RolloutMode::Variable;
    ActionKind action_kind = ActionKind::Discrete;
    int obs_dim = 0;
    int act_dim = 0;
    int hidden_dim = 0;
  };

  explicit RolloutBuffer(Config cfg);

  /// Opens a fresh rollout and commits any pending carryover steps first.
  void begin_rollout(std::uint64_t snapshot_version);

  AppendOutcome append_step(const EnvStepRecord& rec);

  /// Preemption: accept no further commits regardless of the step count.
  void force_close();

  bool open() const { return open_; }
  int committed() const { return static_cast<int>(steps_.size()); }
  int capacity() const { return cfg_.T * cfg_.N; }
  int env_count(int env) const { return per_env_counts_[env]; }
  bool env_at_cap(int env) const {
    return cfg_.mode == RolloutMode::Fixed && per_env_counts_[env] >= cfg_.T;
  }
  int carryover_count() const;

  void set_bootstrap(int env, Scalar value);
  bool bootstrap_set(int env) const { return bootstrap_valid_[env] != 0; }
  void set_collect_wall_time(double seconds) { collect_time_ = seconds; }

  /// Builds the immutable view. Throws on an empty buffer.
  RolloutView close_rollout();

  const Config& config() const { return cfg_; }

 private:
  AppendOutcome commit(const EnvStepRecord& rec);

  Config cfg_;
  bool open_ = false;
  std::uint64_t snapshot_version_ = 0;
  std::vector<EnvStepRecord> steps_;
  std::vector<std::vector<int>> env_slots_;
  std::vector<int> per_env_counts_;
  std::vector<std::uint8_t> env_prev_done_;
  std::vector<std::optional<EnvStepRecord>> carryover_;
  Vector bootstrap_;
  std::vector<std::uint8_t> bootstrap_valid_;
  double collect_time_ = 0;
  int next_seq_id_ = 0;
};

/// Appends `deficit` steps of whole sequences from `prev` to `view`, flagged
/// stale, truncating the last sequence to fit. Advantages/returns come along
/// verbatim. Throws if `prev` cannot cover the deficit.
void backfill_stale(RolloutView& view, const RolloutView& prev, int deficit);

/// Debug dump / replay of a closed view as JSONL.
void dump_view(const RolloutView& view, std::ostream& out);
RolloutView load_view(std::istream& in);

}  // namespace ver
