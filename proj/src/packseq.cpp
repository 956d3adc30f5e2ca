#include "ver/packseq.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <string>

namespace ver {

std::vector<SequenceGroup> split_minibatches(const RolloutView& view, int B, std::uint64_t seed) {
  std::vector<int> perm(view.seqs.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(seed);
  std::shuffle(perm.begin(), perm.end(), gen);
  return split_in_order(view, B, perm);
}

std::vector<SequenceGroup> split_in_order(const RolloutView& view, int B,
                                          const std::vector<int>& perm) {
  if (B < 1) throw ProtocolError("split_minibatches: B must be >= 1");
  const int total = view.size();
  if (total == 0) throw ProtocolError("split_minibatches: empty view");
  if (total == view.T * view.N && total % B != 0) {
    throw ProtocolError("split_minibatches: B=" + std::to_string(B) +
                        " does not divide T*N=" + std::to_string(total));
  }

  // exact when B | total; otherwise the first (total % B) batches get one extra
  const int base = total / B;
  const int rem = total % B;

  std::vector<SequenceGroup> groups(B);
  int b = 0;
  int room = base + (rem > 0 ? 1 : 0);
  for (int pi : perm) {
    SequenceDescriptor cur = view.seqs[pi];
    while (cur.length > 0) {
      if (room == 0) {
        ++b;
        room = base + (b < rem ? 1 : 0);
      }
      const int take = std::min(cur.length, room);
      SequenceDescriptor part = cur;
      part.length = take;
      groups[b].seqs.push_back(part);
      groups[b].total_steps += take;
      room -= take;
      cur.start_offset += take;
      cur.skip += take;
      cur.length -= take;
    }
  }
  return groups;
}

PackedBatch pack(const RolloutView& view, const SequenceGroup& group) {
  if (group.seqs.empty()) throw ProtocolError("pack: empty sequence group");

  PackedBatch out;
  const int k = static_cast<int>(group.seqs.size());
  out.sorted_to_group.resize(k);
  std::iota(out.sorted_to_group.begin(), out.sorted_to_group.end(), 0);
  std::stable_sort(out.sorted_to_group.begin(), out.sorted_to_group.end(),
                   [&](int a, int b) { return group.seqs[a].length > group.seqs[b].length; });
  out.seqs.reserve(k);
  for (int i : out.sorted_to_group) out.seqs.push_back(group.seqs[i]);

  const int max_len = out.seqs.front().length;
  out.batch_sizes.resize(max_len);
  out.offsets.resize(max_len);
  int pos = 0;
  for (int t = 0; t < max_len; ++t) {
    int alive = 0;
    while (alive < k && out.seqs[alive].length > t) ++alive;
    out.batch_sizes[t] = alive;
    out.offsets[t] = pos;
    pos += alive;
  }
  out.total_steps = pos;
  out.slots.resize(pos);
  for (int t = 0; t < max_len; ++t) {
    for (int j = 0; j < out.batch_sizes[t]; ++j) {
      out.slots[out.offsets[t] + j] = out.seqs[j].start_offset + t;
    }
  }
  (void)view;
  return out;
}

std::vector<std::vector<int>> unpack(const PackedBatch& batch) {
  const int k = static_cast<int>(batch.seqs.size());
  std::vector<std::vector<int>> by_group(k);
  for (int j = 0; j < k; ++j) {
    const int gi = batch.sorted_to_group[j];
    by_group[gi].resize(batch.seqs[j].length);
    for (int t = 0; t < batch.seqs[j].length; ++t) {
      by_group[gi][t] = batch.slots[batch.offsets[t] + j];
    }
  }
  return by_group;
}

}  // namespace ver
