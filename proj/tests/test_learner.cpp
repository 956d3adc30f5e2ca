#include <doctest.h>

#include "ver/learner.hpp"
#include "test_helpers.hpp"

#include <cmath>
#include <vector>

using namespace ver;
using ver::testing::make_view;
using ver::testing::random_lengths;

namespace {

// independent double-sum oracle: A_t = sum_k (gamma*lambda)^k delta_{t+k},
// cut at done boundaries
void gae_double_sum(const RolloutView& view, Scalar gamma, Scalar lambda,
                    Vector& adv, Vector& ret) {
  adv = Vector::Zero(view.size());
  ret = Vector::Zero(view.size());
  for (int e = 0; e < view.N; ++e) {
    std::vector<int> slots;
    for (int i = 0; i < view.size(); ++i)
      if (view.env_index[i] == e && !view.stale[i]) slots.push_back(i);
    const int n = static_cast<int>(slots.size());
    for (int t = 0; t < n; ++t) {
      Scalar acc = 0, w = 1;
      for (int k = t; k < n; ++k) {
        const int i = slots[k];
        Scalar next_v = 0;
        if (!view.done[i]) {
          next_v = (k + 1 < n) ? view.value[slots[k + 1]] : view.env_bootstrap[e];
        }
        const Scalar mask = view.done[i] ? 0.0 : 1.0;
        const Scalar delta = view.reward[i] + gamma * next_v * mask - view.value[i];
        acc += w * delta;
        if (view.done[i]) break;
        w *= gamma * lambda;
      }
      adv[slots[t]] = acc;
      ret[slots[t]] = acc + view.value[slots[t]];
    }
  }
}

ModelConfig tiny_cfg(int obs_dim = 2, int hidden = 4, int actions = 2) {
  ModelConfig c;
  c.obs_dim = obs_dim;
  c.encoder_dim = 4;
  c.hidden_dim = hidden;
  c.action_kind = ActionKind::Discrete;
  c.num_actions = actions;
  return c;
}

// fills stored log-probs with the policy's actual log-probs (on-policy data)
void make_on_policy(RolloutView& view, const PolicyParams& p) {
  for (const auto& d : view.seqs) {
    Matrix h = view.h0.row(d.h0_index);
    for (int t = 0; t < d.length; ++t) {
      const int slot = d.start_offset + t;
      ActResult r = act(p, view.obs.row(slot), h);
      view.log_prob[slot] = categorical_log_prob(r.dist.row(0), view.act_disc[slot]);
      view.value[slot] = r.value[0];
      h = r.h_new;
    }
  }
}

}  // namespace

TEST_CASE("gae: single reward at t=0 with gamma=lambda=1") {
  RolloutView v = make_view({3});
  v.reward[0] = 1.0;
  v.env_bootstrap_valid[0] = 0;
  v.done[2] = 1;  // terminal so no bootstrap needed
  compute_gae(v, 1.0, 1.0);
  CHECK(v.advantage[0] == doctest::Approx(1.0));
  CHECK(v.advantage[1] == doctest::Approx(0.0));
  CHECK(v.advantage[2] == doctest::Approx(0.0));
}

TEST_CASE("gae: all zeros in, all zeros out") {
  RolloutView v = make_view({4});
  compute_gae(v, 0.99, 0.95);
  CHECK(v.advantage.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK(v.returns.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("gae: done step ignores everything after it") {
  RolloutView v = make_view({2, 2});
  // seq 0 ends with done at its second step
  v.reward[1] = 3.0;
  v.value[1] = 1.0;
  compute_gae(v, 0.99, 0.95);
  CHECK(v.advantage[1] == doctest::Approx(3.0 - 1.0));
}

TEST_CASE("gae: missing bootstrap for a truncated tail throws") {
  RolloutView v = make_view({3});
  v.done[2] = 0;  // truncated, not terminal
  v.env_bootstrap_valid[0] = 0;
  CHECK_THROWS_AS(compute_gae(v, 0.99, 0.95), ProtocolError);
  v.env_bootstrap_valid[0] = 1;
  v.env_bootstrap[0] = 0.5;
  CHECK_NOTHROW(compute_gae(v, 0.99, 0.95));
}

TEST_CASE("gae: recursive equals direct double-sum within 1e-10") {
  CounterRng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto lengths = random_lengths(8, 8, rng);
    RolloutView v = make_view(lengths, 2, 4, 8, 1);
    // random rewards, values, dones, bootstrap
    for (int i = 0; i < v.size(); ++i) {
      v.reward[i] = rng.normal();
      v.value[i] = rng.normal();
      v.done[i] = rng.uniform() < 0.25 ? 1 : 0;
    }
    // keep env blocks coherent: recompute per-env "last" semantics
    v.env_bootstrap[0] = rng.normal();
    v.env_bootstrap_valid[0] = 1;

    compute_gae(v, 0.99, 0.95);
    Vector adv, ret;
    gae_double_sum(v, 0.99, 0.95, adv, ret);
    CHECK((v.advantage - adv).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((v.returns - ret).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("ppo loss: on-policy data gives ratio 1, weight 1, no clipping") {
  ModelConfig cfg = tiny_cfg();
  PolicyParams p = PolicyParams::init(cfg, 7);
  RolloutView v = make_view({3, 2, 3}, 2, 4);
  make_on_policy(v, p);
  compute_gae(v, 0.99, 0.95);

  SequenceGroup g{v.seqs, v.size()};
  PackedBatch b = pack(v, g);
  Matrix h0(3, 4);
  for (int s = 0; s < 3; ++s) h0.row(s) = v.h0.row(b.seqs[s].h0_index);
  PPOLossResult res = ppo_loss(p, v, b, PPOConfig{}, 1e-3, h0, false);

  CHECK(res.ratio_sum / res.steps == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(res.clip_count == doctest::Approx(0.0));
  CHECK(res.w_sum / res.steps == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ppo loss: importance weight caps at 1 and follows low ratios") {
  ModelConfig cfg = tiny_cfg();
  PolicyParams p = PolicyParams::init(cfg, 9);
  RolloutView v = make_view({2}, 2, 4);
  make_on_policy(v, p);
  // slot 0: behavior prob lower -> ratio 1.5 -> w = 1.0
  // slot 1: behavior prob higher -> ratio 0.5 -> w = 0.5
  v.log_prob[0] -= std::log(1.5);
  v.log_prob[1] -= std::log(0.5);
  compute_gae(v, 0.99, 0.95);

  SequenceGroup g{v.seqs, v.size()};
  PackedBatch b = pack(v, g);
  Matrix h0 = v.h0;
  PPOLossResult res = ppo_loss(p, v, b, PPOConfig{}, 0.0, h0, false);
  CHECK(res.w_max == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(res.w_sum == doctest::Approx(1.5).epsilon(1e-9));  // 1.0 + 0.5
}

TEST_CASE("ppo loss: positive advantage with ratio 1.3 activates the clipped branch") {
  ModelConfig cfg = tiny_cfg();
  PolicyParams p = PolicyParams::init(cfg, 11);
  RolloutView v = make_view({1}, 2, 4);
  make_on_policy(v, p);
  v.log_prob[0] -= std::log(1.3);  // ratio exactly 1.3
  v.advantage[0] = 1.0;
  v.returns[0] = v.value[0];  // zero value error

  PPOConfig cfgp;
  cfgp.value_loss_coef = 0.0;
  SequenceGroup g{v.seqs, v.size()};
  PackedBatch b = pack(v, g);
  PPOLossResult res = ppo_loss(p, v, b, cfgp, 0.0, v.h0, false);
  // surrogate = min(1.3*1, 1.2*1) = 1.2, w = min(1.3, 1) = 1
  CHECK(res.policy_loss == doctest::Approx(-1.2).epsilon(1e-9));
  CHECK(res.clip_count == doctest::Approx(1.0));
}

TEST_CASE("full ppo loss gradient matches finite differences within 1e-3") {
  ModelConfig cfg = tiny_cfg(2, 4, 3);
  PolicyParams p = PolicyParams::init(cfg, 13);
  CounterRng rng(21);

  RolloutView v = make_view({3, 2, 2, 1}, 2, 4);
  for (int i = 0; i < v.size(); ++i) {
    v.obs(i, 0) = rng.normal();
    v.obs(i, 1) = rng.normal();
    v.act_disc[i] = static_cast<int>(rng.uniform_int(3));
    v.log_prob[i] = -1.0 + 0.3 * rng.normal();  // off-policy behavior
    v.advantage[i] = rng.normal();
    v.returns[i] = rng.normal();
  }

  SequenceGroup g{v.seqs, v.size()};
  PackedBatch b = pack(v, g);
  Matrix h0(static_cast<int>(b.seqs.size()), 4);
  for (std::size_t s = 0; s < b.seqs.size(); ++s) h0.row(s) = v.h0.row(b.seqs[s].h0_index);

  const Scalar alpha = 0.01;
  PPOLossResult res = ppo_loss(p, v, b, PPOConfig{}, alpha, h0, true);
  // the IS weight is a stop-gradient: freeze it during differencing
  const Matrix frozen_w = res.is_weights;

  auto ts = p.tensors();
  int checked = 0;
  for (std::size_t ti = 0; ti < ts.size(); ++ti) {
    Matrix& w = *ts[ti].second;
    for (int r = 0; r < w.rows(); ++r) {
      for (int c = 0; c < w.cols(); ++c) {
        if ((r + c + ti) % 3 != 0) continue;  // sample a third of the entries
        const Scalar h = 1e-5;
        const Scalar keep = w(r, c);
        w(r, c) = keep + h;
        const Scalar up = ppo_loss(p, v, b, PPOConfig{}, alpha, h0, false, &frozen_w).loss;
        w(r, c) = keep - h;
        const Scalar dn = ppo_loss(p, v, b, PPOConfig{}, alpha, h0, false, &frozen_w).loss;
        w(r, c) = keep;
        const Scalar fd = (up - dn) / (2 * h);
        const Scalar an = res.grads[ti](r, c);
        const Scalar denom = std::max({Scalar(1), std::abs(fd), std::abs(an)});
        CHECK(std::abs(fd - an) / denom < 1e-3);
        ++checked;
      }
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("entropy controller: fixed point, direction, clamping") {
  EntropyController c;
  c.alpha = 0.01;
  c.target = 0.5;
  c.lr = 0.1;

  SUBCASE("H at target leaves alpha unchanged") {
    c.update(0.5);
    CHECK(c.alpha == doctest::Approx(0.01));
  }
  SUBCASE("H below target raises alpha") {
    c.update(0.2);
    CHECK(c.alpha > 0.01);
  }
  SUBCASE("H above target lowers alpha but clamps at the floor") {
    for (int i = 0; i < 100; ++i) c.update(5.0);
    CHECK(c.alpha == doctest::Approx(1e-4));
  }
  SUBCASE("alpha clamps at the ceiling") {
    for (int i = 0; i < 10000; ++i) c.update(-5.0);
    CHECK(c.alpha == doctest::Approx(1.0));
  }
}

TEST_CASE("entropy loss value and alpha gradient match the formula") {
  EntropyController c;
  c.alpha = 0.3;
  c.target = 0.1;
  const Scalar H = 0.7;
  CHECK(entropy_loss_value(H, c) == doctest::Approx(0.3 * (0.1 - H) - 0.3 * H));
  // dLoss/dalpha = target - H; the dual step moves alpha by lr*(target-H)
  EntropyController c2 = c;
  c2.lr = 1.0;
  c2.update(H);
  CHECK(c2.alpha == doctest::Approx(std::max(1e-4, 0.3 + (0.1 - 0.7))));
}

TEST_CASE("learner: split tails get their initial state from a replay of the head") {
  ModelConfig cfg = tiny_cfg();
  PolicyParams p = PolicyParams::init(cfg, 17);
  RolloutView v = make_view({6}, 2, 4);
  CounterRng rng(3);
  for (int i = 0; i < v.size(); ++i) v.obs(i, 0) = rng.normal();

  Learner learner(p, PPOConfig{}, EntropyController{}, CosineSchedule{1e-4, 1000}, 5);

  // force a split: 6 steps into two batches of 3
  auto groups = split_in_order(v, 2, {0});
  REQUIRE(groups[1].seqs[0].skip == 3);
  PackedBatch tail = pack(v, groups[1]);
  Matrix h0 = learner.batch_h0(v, tail);

  Matrix h = v.h0.row(0);
  for (int t = 0; t < 3; ++t) h = act(learner.params(), v.obs.row(t), h).h_new;
  CHECK((h0.row(0) - h.row(0)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("learner: two updates on frozen data with zero lr give identical stats") {
  ModelConfig cfg = tiny_cfg();
  PolicyParams p = PolicyParams::init(cfg, 19);
  RolloutView v = make_view({4, 4, 4, 4}, 2, 4, 4, 4);
  make_on_policy(v, p);
  for (int i = 0; i < v.size(); ++i) v.reward[i] = (i % 3 == 0) ? 1.0 : 0.0;

  EntropyController ec;
  ec.lr = 0.0;
  Learner learner(p, PPOConfig{}, ec, CosineSchedule{0.0, 1000}, 5);

  RolloutView v1 = v, v2 = v;
  learner.set_update_index(0);
  TrainStats a = learner.update(v1);
  learner.set_update_index(0);
  learner.set_consumed_steps(0);
  TrainStats b = learner.update(v2);

  CHECK(a.loss == doctest::Approx(b.loss));
  CHECK(a.mean_ratio == doctest::Approx(b.mean_ratio));
  CHECK(a.clip_fraction == doctest::Approx(b.clip_fraction));
  CHECK(a.entropy == doctest::Approx(b.entropy));
  CHECK(a.value_loss == doctest::Approx(b.value_loss));
  CHECK(a.clip_fraction >= 0.0);
  CHECK(a.clip_fraction <= 1.0);
}

TEST_CASE("learner: epochs use different, reproducible permutations") {
  RolloutView v = make_view({4, 4, 4, 4}, 2, 4, 4, 4);
  auto g0 = split_minibatches(v, 2, 100);
  auto g0_again = split_minibatches(v, 2, 100);
  auto g1 = split_minibatches(v, 2, 101);

  auto fingerprint = [](const std::vector<SequenceGroup>& gs) {
    std::vector<int> ids;
    for (const auto& g : gs)
      for (const auto& d : g.seqs) ids.push_back(d.seq_id);
    return ids;
  };
  CHECK(fingerprint(g0) == fingerprint(g0_again));
  CHECK(fingerprint(g0) != fingerprint(g1));
}

TEST_CASE("learner: update trains value function toward returns") {
  // constant reward 1 every step; value head should move toward positive
  ModelConfig cfg = tiny_cfg();
  PolicyParams p = PolicyParams::init(cfg, 23);
  Learner learner(p, PPOConfig{}, EntropyController{}, CosineSchedule{1e-2, 1000000}, 5);

  Scalar first_vloss = 0, last_vloss = 0;
  for (int u = 0; u < 30; ++u) {
    RolloutView v = make_view({4, 4, 4, 4}, 2, 4, 4, 4);
    make_on_policy(v, learner.params());
    for (int i = 0; i < v.size(); ++i) v.reward[i] = 1.0;
    TrainStats st = learner.update(v);
    if (u == 0) first_vloss = st.value_loss;
    last_vloss = st.value_loss;
  }
  CHECK(last_vloss < first_vloss);
}
