#include <doctest.h>

#include "ver/envsim.hpp"

#include <cmath>
#include <vector>

using namespace ver;

namespace {

TaskSpec delayed_cue_spec(int horizon = 8) {
  TaskSpec s;
  s.task = TaskId::DelayedCue;
  s.horizon = horizon;
  return s;
}

TaskSpec reach_spec() {
  TaskSpec s;
  s.task = TaskId::Reach2D;
  return s;
}

// hand-coded oracle: store the cue at t=0, always emit the matching action
struct DelayedCueOracle {
  Scalar cue = 0;
  Action operator()(const Vector& obs, int t) {
    if (t == 0) cue = obs[0];
    return Action::discrete(cue > 0 ? 1 : 0);
  }
};

Action reach_oracle(const Vector& obs, Scalar step_size) {
  Eigen::Vector2d agent(obs[0], obs[1]), goal(obs[2], obs[3]);
  Eigen::Vector2d d = goal - agent;
  if (d.norm() > step_size) d *= step_size / d.norm();
  Vector a(2);
  a << d.x(), d.y();
  return Action::continuous(a);
}

}  // namespace

TEST_CASE("reset yields a cue in {-1,+1}") {
  Env env(delayed_cue_spec(), 0);
  Vector obs = env.reset(7);
  CHECK((obs[0] == doctest::Approx(-1.0) || obs[0] == doctest::Approx(1.0)));
}

TEST_CASE("reach2d reset obs is agent and goal position in bounds") {
  Env env(reach_spec(), 0);
  Vector obs = env.reset(0);
  REQUIRE(obs.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(obs[i] >= -1.0);
    CHECK(obs[i] <= 1.0);
  }
}

TEST_CASE("reset twice with same seed is identical") {
  for (TaskSpec spec : {delayed_cue_spec(), reach_spec()}) {
    Env a(spec, 3), b(spec, 3);
    CHECK(a.reset(99) == b.reset(99));
  }
}

TEST_CASE("delayed cue rewards the matching action at the final step") {
  Env env(delayed_cue_spec(8), 0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Vector obs = env.reset(seed);
    DelayedCueOracle oracle;
    Scalar ret = 0;
    for (int t = 0; t < 8; ++t) {
      StepResult r = env.step(oracle(obs, t));
      ret += r.reward;
      CHECK(r.done == (t == 7));
      obs = r.observation;
    }
    CHECK(ret == doctest::Approx(1.0));
  }
}

TEST_CASE("delayed cue mismatched action earns nothing") {
  Env env(delayed_cue_spec(4), 0);
  Vector obs = env.reset(1);
  const int wrong = obs[0] > 0 ? 0 : 1;
  Scalar ret = 0;
  for (int t = 0; t < 4; ++t) ret += env.step(Action::discrete(wrong)).reward;
  CHECK(ret == doctest::Approx(0.0));
}

TEST_CASE("reach2d oracle reaches the goal with reward 1") {
  TaskSpec spec = reach_spec();
  Env env(spec, 0);
  Vector obs = env.reset(12);
  bool reached = false;
  for (int t = 0; t < spec.max_steps && !reached; ++t) {
    StepResult r = env.step(reach_oracle(obs, spec.step_size));
    obs = r.observation;
    if (r.reward == doctest::Approx(1.0)) {
      CHECK(r.done);
      reached = true;
    }
  }
  CHECK(reached);
}

TEST_CASE("stepping a done episode is a protocol error") {
  Env env(delayed_cue_spec(2), 0);
  env.reset(0);
  env.step(Action::discrete(0));
  env.step(Action::discrete(0));
  CHECK(env.episode_done());
  CHECK_THROWS_AS(env.step(Action::discrete(0)), ProtocolError);
  env.reset_episode();
  CHECK_NOTHROW(env.step(Action::discrete(0)));
}

TEST_CASE("determinism: seed and action sequence fix the whole trace") {
  TaskSpec spec = delayed_cue_spec(6);
  spec.latency.enabled = true;
  spec.latency.base = 0.001;
  spec.latency.action_sigma = 0.5;
  spec.latency.episode_sigma = 0.75;

  auto run = [&](std::vector<StepResult>& out) {
    Env env(spec, 2);
    Vector obs = env.reset(31);
    for (int ep = 0; ep < 3; ++ep) {
      if (ep > 0) obs = env.reset_episode();
      for (int t = 0; t < 6; ++t) out.push_back(env.step(Action::discrete(t % 2)));
    }
  };
  std::vector<StepResult> a, b;
  run(a);
  run(b);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].reward == b[i].reward);
    CHECK(a[i].done == b[i].done);
    CHECK(a[i].latency_spent == b[i].latency_spent);
    CHECK(a[i].observation == b[i].observation);
  }
}

TEST_CASE("latencies are strictly positive and episode scale is constant per episode") {
  TaskSpec spec;
  spec.task = TaskId::LatencyOnly;
  spec.episode_len = 10;
  spec.latency.enabled = true;
  spec.latency.base = 0.002;
  spec.latency.action_sigma = 0.5;
  spec.latency.episode_sigma = 0.75;

  Env env(spec, 0);
  env.reset(5);
  std::vector<Scalar> scales;
  for (int ep = 0; ep < 8; ++ep) {
    if (ep > 0) env.reset_episode();
    const Scalar scale = env.episode_scale();
    scales.push_back(scale);
    for (int t = 0; t < 10; ++t) {
      StepResult r = env.step(Action::discrete(0));
      CHECK(r.latency_spent > 0.0);
      CHECK(env.episode_scale() == scale);
    }
  }
  // across episodes the multiplier varies
  bool varies = false;
  for (std::size_t i = 1; i < scales.size(); ++i) varies |= scales[i] != scales[0];
  CHECK(varies);
}

TEST_CASE("per-env latency scale multiplies the base") {
  TaskSpec spec;
  spec.task = TaskId::LatencyOnly;
  spec.episode_len = 4;
  spec.latency.enabled = true;
  spec.latency.base = 0.001;
  spec.latency.env_scales = {1.0, 2.0};

  Env fast(spec, 0), slow(spec, 1);
  fast.reset(1);
  slow.reset(1);
  Scalar lf = fast.step(Action::discrete(0)).latency_spent;
  Scalar ls = slow.step(Action::discrete(0)).latency_spent;
  CHECK(ls == doctest::Approx(2.0 * lf));
}

TEST_CASE("optimal return: delayed cue is 1, zero-reward task is 0") {
  CHECK(optimal_return(delayed_cue_spec()) == doctest::Approx(1.0));
  TaskSpec lat;
  lat.task = TaskId::LatencyOnly;
  CHECK(optimal_return(lat) == doctest::Approx(0.0));
}

TEST_CASE("optimal return: reach2d matches a brute-force rollout of the oracle") {
  TaskSpec spec = reach_spec();
  const int episodes = 64;
  // independent oracle: actually run the straight-line policy
  Env env(spec, 0);
  Vector obs = env.reset(0);
  Scalar total = 0;
  for (int e = 0; e < episodes; ++e) {
    if (e > 0) obs = env.reset_episode();
    for (int t = 0; t < spec.max_steps; ++t) {
      StepResult r = env.step(reach_oracle(obs, spec.step_size));
      obs = r.observation;
      total += r.reward;
      if (r.done) break;
    }
  }
  const Scalar simulated = total / episodes;
  CHECK(optimal_return(spec, 0, episodes) == doctest::Approx(simulated).epsilon(1e-9));
}
