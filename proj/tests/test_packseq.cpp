#include <doctest.h>

#include "ver/packseq.hpp"
#include "test_helpers.hpp"

#include <algorithm>
#include <numeric>
#include <set>

using namespace ver;
using ver::testing::make_view;
using ver::testing::random_lengths;

TEST_CASE("greedy fill splits a straddling sequence") {
  // 16 steps, B=2, lengths [2,1,3,6,4] in dealt order
  RolloutView v = make_view({2, 1, 3, 6, 4});
  auto groups = split_in_order(v, 2, {0, 1, 2, 3, 4});
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].total_steps == 8);
  CHECK(groups[1].total_steps == 8);

  REQUIRE(groups[0].seqs.size() == 4);
  CHECK(groups[0].seqs[0].length == 2);
  CHECK(groups[0].seqs[1].length == 1);
  CHECK(groups[0].seqs[2].length == 3);
  CHECK(groups[0].seqs[3].length == 2);  // head of the 6
  CHECK(groups[0].seqs[3].skip == 0);

  REQUIRE(groups[1].seqs.size() == 2);
  CHECK(groups[1].seqs[0].length == 4);  // tail of the 6
  CHECK(groups[1].seqs[0].skip == 2);
  CHECK(groups[1].seqs[0].seq_id == groups[0].seqs[3].seq_id);
  CHECK(groups[1].seqs[0].parent_start_offset == groups[0].seqs[3].start_offset);
  CHECK(groups[1].seqs[1].length == 4);
}

TEST_CASE("B=1 gives one mini-batch holding everything") {
  RolloutView v = make_view({3, 5, 2});
  auto groups = split_minibatches(v, 1, 7);
  REQUIRE(groups.size() == 1);
  CHECK(groups[0].total_steps == 10);
  CHECK(groups[0].seqs.size() == 3);
}

TEST_CASE("equal-length degenerate split: one sequence per mini-batch") {
  RolloutView v = make_view({4, 4, 4, 4}, 2, 4, 4, 4);
  auto groups = split_minibatches(v, 4, 3);
  REQUIRE(groups.size() == 4);
  for (const auto& g : groups) {
    CHECK(g.total_steps == 4);
    CHECK(g.seqs.size() == 1);
  }
}

TEST_CASE("B not dividing T*N is rejected") {
  RolloutView v = make_view({4, 4}, 2, 4, 4, 2);
  CHECK_THROWS_AS(split_minibatches(v, 3, 0), ProtocolError);
}

TEST_CASE("pack layout: lengths [3,2,1] give batch sizes [3,2,1]") {
  RolloutView v = make_view({3, 2, 1});
  SequenceGroup g{v.seqs, v.size()};
  PackedBatch b = pack(v, g);
  CHECK(b.batch_sizes == std::vector<int>{3, 2, 1});
  CHECK(b.total_steps == 6);
  // timestep 0 holds the first element of each sequence, longest first
  CHECK(v.obs(b.slots[0], 0) == doctest::Approx(0));  // seq0 t0
  CHECK(v.obs(b.slots[1], 0) == doctest::Approx(3));  // seq1 t0
  CHECK(v.obs(b.slots[2], 0) == doctest::Approx(5));  // seq2 t0
}

TEST_CASE("pack layout: single sequence and equal lengths") {
  RolloutView v1 = make_view({5});
  PackedBatch b1 = pack(v1, SequenceGroup{v1.seqs, 5});
  CHECK(b1.batch_sizes == std::vector<int>(5, 1));

  RolloutView v2 = make_view({4, 4});
  PackedBatch b2 = pack(v2, SequenceGroup{v2.seqs, 8});
  CHECK(b2.batch_sizes == std::vector<int>(4, 2));
}

TEST_CASE("pack rejects an empty group") {
  RolloutView v = make_view({2});
  CHECK_THROWS_AS(pack(v, SequenceGroup{}), ProtocolError);
}

TEST_CASE("property: round-trip, partition, equal sizes, non-increasing") {
  CounterRng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 8, N = 4, B = 2;
    auto lengths = random_lengths(T * N, T, rng);
    RolloutView v = make_view(lengths, 2, 4, T, N);
    auto groups = split_minibatches(v, B, trial);

    REQUIRE(groups.size() == B);
    std::set<int> seen;
    for (const auto& g : groups) {
      CHECK(g.total_steps == T * N / B);  // exact equal sizes
      PackedBatch b = pack(v, g);
      CHECK(b.total_steps == g.total_steps);
      for (std::size_t t = 1; t < b.batch_sizes.size(); ++t) {
        CHECK(b.batch_sizes[t] <= b.batch_sizes[t - 1]);
      }
      CHECK(std::accumulate(b.batch_sizes.begin(), b.batch_sizes.end(), 0) == b.total_steps);

      // unpack reproduces each dealt sequence exactly, in group order
      auto unpacked = unpack(b);
      REQUIRE(unpacked.size() == g.seqs.size());
      for (std::size_t s = 0; s < g.seqs.size(); ++s) {
        REQUIRE(static_cast<int>(unpacked[s].size()) == g.seqs[s].length);
        for (int t = 0; t < g.seqs[s].length; ++t) {
          CHECK(unpacked[s][t] == g.seqs[s].start_offset + t);
        }
      }
      for (int slot : b.slots) {
        CHECK(seen.insert(slot).second);  // disjoint
      }
      // permutation metadata maps packed rows back to sequence ids
      for (std::size_t j = 0; j < b.seqs.size(); ++j) {
        CHECK(b.seqs[j].seq_id == g.seqs[b.sorted_to_group[j]].seq_id);
      }
    }
    CHECK(static_cast<int>(seen.size()) == T * N);  // union covers the view
  }
}
