#pragma once

#include "ver/rollout.hpp"
#include "ver/types.hpp"

#include <cstdint>
#include <vector>

namespace ver {

/// Sequences assigned to one mini-batch, in assignment order.
struct SequenceGroup {
  std::vector<SequenceDescriptor> seqs;
  int total_steps = 0;
};

/// Time-major packed layout of one SequenceGroup. Sequences are sorted by
/// length descending so per-timestep batch sizes are non-increasing; packed
/// position offsets[t] + j holds timestep t of the j-th longest sequence.
struct PackedBatch {
  std::vector<SequenceDescriptor> seqs;  // sorted by length desc
  std::vector<int> sorted_to_group;      // sorted index -> group index
  std::vector<int> batch_sizes;          // live sequences per timestep
  std::vector<int> offsets;              // start of each timestep's block
  std::vector<int> slots;                // packed position -> view slot
  int total_steps = 0;

  int max_len() const { return static_cast<int>(batch_sizes.size()); }
};

/// Randomly permutes the view's sequences and deals them into B mini-batches
/// of exactly size/B steps each, splitting a sequence that straddles a batch
/// boundary. The split tail keeps its parent's h0 reference plus a skip count
/// so the learner can recompute its true initial state.
std::vector<SequenceGroup> split_minibatches(const RolloutView& view, int B, std::uint64_t seed);

/// Deterministic variant: deal sequences in the given order (no shuffle).
std::vector<SequenceGroup> split_in_order(const RolloutView& view, int B,
                                          const std::vector<int>& order);

PackedBatch pack(const RolloutView& view, const SequenceGroup& group);

/// Inverse of pack: per-sequence view slots, in group order. Test oracle.
std::vector<std::vector<int>> unpack(const PackedBatch& batch);

}  // namespace ver
