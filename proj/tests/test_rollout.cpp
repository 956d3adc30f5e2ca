#include <doctest.h>

#include "ver/rollout.hpp"
#include "ver/rng.hpp"

#include <sstream>
#include <vector>

using namespace ver;

namespace {

RolloutBuffer::Config small_cfg(int T, int N, RolloutMode mode) {
  RolloutBuffer::Config c;
  c.T = T;
  c.N = N;
  c.mode = mode;
  c.action_kind = ActionKind::Discrete;
  c.obs_dim = 2;
  c.act_dim = 0;
  c.hidden_dim = 3;
  return c;
}

EnvStepRecord rec(int env, std::int64_t episode, int t, bool done, Scalar reward = 0.0) {
  EnvStepRecord r;
  r.env_index = env;
  r.episode_index = episode;
  r.step_in_episode = t;
  r.obs = Vector::Zero(2);
  r.obs[0] = env;
  r.obs[1] = t;
  r.action = Action::discrete(t % 2);
  r.log_prob = -0.5;
  r.value = 0.1 * t;
  r.reward = reward;
  r.done = done;
  r.h_before = Vector::Constant(3, 0.01 * env);
  return r;
}

}  // namespace

TEST_CASE("variable mode accepts any per-env mix up to T*N") {
  RolloutBuffer buf(small_cfg(4, 4, RolloutMode::Variable));
  buf.begin_rollout(1);
  const std::vector<int> counts = {6, 2, 4, 4};
  // interleave arrivals: env0 fastest
  std::vector<int> t(4, 0);
  std::vector<int> left = counts;
  int committed = 0;
  while (committed < 16) {
    for (int e = 0; e < 4; ++e) {
      if (left[e] > 0) {
        CHECK(buf.append_step(rec(e, 0, t[e]++, false)) == AppendOutcome::Accepted);
        --left[e];
        ++committed;
        if (committed == 16) break;
      }
    }
  }
  CHECK(buf.committed() == 16);
  CHECK_FALSE(buf.open());
  RolloutView v = buf.close_rollout();
  CHECK(v.size() == 16);
  CHECK(v.per_env_counts == counts);
}

TEST_CASE("fixed mode rejects an env beyond T until the next rollout") {
  RolloutBuffer buf(small_cfg(4, 2, RolloutMode::Fixed));
  buf.begin_rollout(1);
  for (int t = 0; t < 4; ++t) CHECK(buf.append_step(rec(0, 0, t, false)) == AppendOutcome::Accepted);
  CHECK(buf.append_step(rec(0, 0, 4, false)) == AppendOutcome::RolloutFull);
  CHECK(buf.committed() == 4);
  for (int t = 0; t < 4; ++t) buf.append_step(rec(1, 0, t, false));
  CHECK_FALSE(buf.open());
  RolloutView v = buf.close_rollout();
  CHECK(v.per_env_counts == std::vector<int>{4, 4});

  buf.begin_rollout(2);
  CHECK(buf.append_step(rec(0, 0, 4, false)) == AppendOutcome::Accepted);
}

TEST_CASE("arrival after close lands in carryover and opens the next rollout") {
  RolloutBuffer buf(small_cfg(2, 2, RolloutMode::Variable));
  buf.begin_rollout(1);
  for (int t = 0; t < 3; ++t) buf.append_step(rec(0, 0, t, false));
  buf.append_step(rec(1, 0, 0, false));
  CHECK_FALSE(buf.open());

  EnvStepRecord late = rec(1, 0, 1, false);
  late.reward = 7.0;
  CHECK(buf.append_step(late) == AppendOutcome::RolloutFull);
  CHECK(buf.carryover_count() == 1);

  // a second pending carryover for the same env is a protocol violation
  CHECK_THROWS_AS(buf.append_step(rec(1, 0, 2, false)), ProtocolError);

  buf.close_rollout();
  buf.begin_rollout(2);
  CHECK(buf.committed() == 1);  // carryover consumed first
  CHECK(buf.carryover_count() == 0);
  for (int t = 0; t < 3; ++t) buf.append_step(rec(0, 1, t, false));
  RolloutView v = buf.close_rollout();
  // first slot of env1's block is the carryover step
  bool found = false;
  for (int i = 0; i < v.size(); ++i) {
    if (v.env_index[i] == 1 && v.step_in_episode[i] == 1) {
      CHECK(v.reward[i] == doctest::Approx(7.0));
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("sequence boundaries: done splits, K >= contributing envs") {
  RolloutBuffer buf(small_cfg(3, 2, RolloutMode::Variable));
  buf.begin_rollout(1);
  buf.append_step(rec(0, 0, 0, false));
  buf.append_step(rec(0, 0, 1, true));   // env0 done at its 2nd step
  buf.append_step(rec(0, 1, 0, false));  // fresh episode
  buf.append_step(rec(1, 0, 0, false));
  buf.append_step(rec(1, 0, 1, false));
  buf.append_step(rec(1, 0, 2, false));
  RolloutView v = buf.close_rollout();

  REQUIRE(v.seqs.size() == 3);
  CHECK(v.seqs[0].length == 2);
  CHECK(v.seqs[1].length == 1);
  CHECK(v.seqs[2].length == 3);
}

TEST_CASE("no episode ends means K equals contributing envs") {
  RolloutBuffer buf(small_cfg(2, 3, RolloutMode::Variable));
  buf.begin_rollout(1);
  for (int e = 0; e < 3; ++e)
    for (int t = 0; t < 2; ++t) buf.append_step(rec(e, 0, t, false));
  RolloutView v = buf.close_rollout();
  CHECK(v.seqs.size() == 3);
}

TEST_CASE("boundary correctness property: seq changes iff prev done or first step") {
  CounterRng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    RolloutBuffer buf(small_cfg(8, 3, RolloutMode::Variable));
    buf.begin_rollout(1);
    std::vector<int> t(3, 0);
    std::vector<std::int64_t> ep(3, 0);
    while (buf.open()) {
      int e = static_cast<int>(rng.uniform_int(3));
      bool done = rng.uniform() < 0.2;
      buf.append_step(rec(e, ep[e], t[e], done));
      if (done) {
        ++ep[e];
        t[e] = 0;
      } else {
        ++t[e];
      }
    }
    RolloutView v = buf.close_rollout();
    for (int i = 1; i < v.size(); ++i) {
      if (v.env_index[i] != v.env_index[i - 1]) continue;  // new env block
      const bool changed = v.seq_of_slot[i] != v.seq_of_slot[i - 1];
      CHECK(changed == static_cast<bool>(v.done[i - 1]));
    }
    // first slot of each env block starts a sequence
    for (int i = 0; i < v.size(); ++i) {
      if (i == 0 || v.env_index[i] != v.env_index[i - 1]) {
        const SequenceDescriptor& d = v.seqs[v.seq_of_slot[i]];
        CHECK(d.start_offset == i);
      }
    }
  }
}

TEST_CASE("closing an empty buffer throws") {
  RolloutBuffer buf(small_cfg(2, 2, RolloutMode::Variable));
  buf.begin_rollout(1);
  buf.force_close();
  CHECK_THROWS_AS(buf.close_rollout(), ProtocolError);
}

TEST_CASE("preempted close reports the deficit and backfill restores T*N") {
  // previous full rollout
  RolloutBuffer buf(small_cfg(8, 2, RolloutMode::Variable));
  buf.begin_rollout(1);
  std::vector<int> t(2, 0);
  while (buf.open()) buf.append_step(rec(buf.committed() % 2, 0, t[buf.committed() % 2]++, false));
  RolloutView prev = buf.close_rollout();
  REQUIRE(prev.size() == 16);

  // preempted current rollout
  buf.begin_rollout(2);
  for (int i = 0; i < 10; ++i) buf.append_step(rec(i % 2, 1, i / 2, false));
  buf.force_close();
  RolloutView v = buf.close_rollout();
  CHECK(v.deficit == 6);

  backfill_stale(v, prev, v.deficit);
  CHECK(v.size() == 16);
  CHECK(v.stale_steps == 6);
  int stale_count = 0;
  for (auto s : v.stale) stale_count += s;
  CHECK(stale_count == 6);

  SUBCASE("deficit zero leaves the view unchanged") {
    RolloutView w = v;
    backfill_stale(w, prev, 0);
    CHECK(w.size() == v.size());
    CHECK(w.stale_steps == v.stale_steps);
  }
  SUBCASE("deficit beyond the previous rollout size throws") {
    RolloutView w = v;
    CHECK_THROWS_AS(backfill_stale(w, prev, prev.size() + 1), ProtocolError);
  }
}

TEST_CASE("conservation across rollouts with carryover") {
  // R rollouts of T*N commits each; pending carryovers excluded
  RolloutBuffer buf(small_cfg(4, 2, RolloutMode::Variable));
  int produced = 0, committed_total = 0;
  std::vector<int> t(2, 0);
  CounterRng rng(3);
  for (int r = 0; r < 5; ++r) {
    buf.begin_rollout(r + 1);
    while (buf.open()) {
      int e = static_cast<int>(rng.uniform_int(2));
      buf.append_step(rec(e, 0, t[e]++, false));
      ++produced;
    }
    // one late arrival after close on a random env
    int e = static_cast<int>(rng.uniform_int(2));
    buf.append_step(rec(e, 0, t[e]++, false));
    ++produced;
    RolloutView v = buf.close_rollout();
    committed_total += v.size();
  }
  CHECK(committed_total == 5 * 8);
  CHECK(produced == committed_total + buf.carryover_count());
}

TEST_CASE("view dump and load round-trip") {
  RolloutBuffer buf(small_cfg(3, 2, RolloutMode::Variable));
  buf.begin_rollout(9);
  buf.append_step(rec(0, 0, 0, false, 0.5));
  buf.append_step(rec(0, 0, 1, true, 1.0));
  buf.append_step(rec(1, 0, 0, false));
  buf.append_step(rec(1, 0, 1, false));
  buf.append_step(rec(0, 1, 0, false));
  buf.append_step(rec(1, 0, 2, false));
  buf.set_bootstrap(0, 0.25);
  buf.set_bootstrap(1, -0.5);
  RolloutView v = buf.close_rollout();

  std::stringstream ss;
  dump_view(v, ss);
  RolloutView w = load_view(ss);

  REQUIRE(w.size() == v.size());
  CHECK(w.T == v.T);
  CHECK(w.seqs.size() == v.seqs.size());
  for (int i = 0; i < v.size(); ++i) {
    CHECK(w.reward[i] == doctest::Approx(v.reward[i]));
    CHECK(w.log_prob[i] == doctest::Approx(v.log_prob[i]));
    CHECK(w.done[i] == v.done[i]);
    CHECK(w.env_index[i] == v.env_index[i]);
  }
  CHECK(w.env_bootstrap[0] == doctest::Approx(0.25));
  CHECK((w.h0 - v.h0).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}
