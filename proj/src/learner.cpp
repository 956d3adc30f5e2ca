#include "ver/learner.hpp"

#include "ver/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ver {

void compute_gae(RolloutView& view, Scalar gamma, Scalar lambda) {
  for (int e = 0; e < view.N; ++e) {
    std::vector<int> slots;
    for (int i = 0; i < view.size(); ++i) {
      if (view.env_index[i] == e && !view.replayed[i]) slots.push_back(i);
    }
    if (slots.empty()) continue;

    Scalar next_adv = 0;
    Scalar next_value = 0;
    {
      const int last = slots.back();
      if (!view.done[last]) {
        if (!view.env_bootstrap_valid[e]) {
          throw ProtocolError("compute_gae: missing bootstrap value for env " +
                              std::to_string(e));
        }
        next_value = view.env_bootstrap[e];
      }
    }
    for (int k = static_cast<int>(slots.size()) - 1; k >= 0; --k) {
      const int i = slots[k];
      const Scalar mask = view.done[i] ? 0.0 : 1.0;
      const Scalar delta = view.reward[i] + gamma * next_value * mask - view.value[i];
      next_adv = delta + gamma * lambda * mask * next_adv;
      view.advantage[i] = next_adv;
      view.returns[i] = next_adv + view.value[i];
      next_value = view.value[i];
    }
  }
}

Learner::Learner(PolicyParams params, PPOConfig cfg, EntropyController entropy,
                 CosineSchedule schedule, std::uint64_t run_seed)
    : params_(std::move(params)),
      cfg_(cfg),
      entropy_(entropy),
      schedule_(schedule),
      adam_(make_adam(params_)),
      run_seed_(run_seed) {}

PPOLossResult ppo_loss(const PolicyParams& params, const RolloutView& view,
                       const PackedBatch& batch, const PPOConfig& cfg, Scalar alpha,
                       const Matrix& h0_sorted, bool want_grads,
                       const Matrix* frozen_is_weights) {
  const int S = batch.total_steps;

  Matrix obs(S, view.obs_dim);
  std::vector<int> act_disc(view.action_kind == ActionKind::Discrete ? S : 0);
  Matrix act_cont(view.action_kind == ActionKind::Continuous ? S : 0, view.act_dim);
  Matrix old_logp(S, 1), adv(S, 1), ret(S, 1);
  for (int i = 0; i < S; ++i) {
    const int slot = batch.slots[i];
    obs.row(i) = view.obs.row(slot);
    if (view.action_kind == ActionKind::Discrete) act_disc[i] = view.act_disc[slot];
    else act_cont.row(i) = view.act_cont.row(slot);
    old_logp(i, 0) = view.log_prob[slot];
    adv(i, 0) = view.advantage[slot];
    ret(i, 0) = view.returns[slot];
  }

  Tape tape;
  TapeParams tp = register_params(tape, params);
  PackedForward f = forward_packed(tape, tp, params.cfg, obs, act_disc, act_cont,
                                   batch.batch_sizes, batch.offsets, h0_sorted);

  auto ratio = tape.exp_op(tape.sub(f.log_prob, tape.constant(old_logp)));
  auto adv_c = tape.constant(adv);
  auto s1 = tape.cmul(ratio, adv_c);
  auto s2 = tape.cmul(tape.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv_c);
  auto surrogate = tape.cmin(s1, s2);

  // truncated IS weight against the stored behavior log-prob, stop-gradient
  Matrix w = frozen_is_weights ? *frozen_is_weights
                               : Matrix(tape.value(ratio).cwiseMin(cfg.is_cap));
  auto policy_loss = tape.scale(tape.mean_all(tape.cmul(tape.constant(w), surrogate)), -1.0);

  auto verr = tape.sub(f.value, tape.constant(ret));
  auto value_loss = tape.scale(tape.mean_all(tape.cmul(verr, verr)), 0.5);

  auto mean_entropy = tape.mean_all(f.entropy);
  auto total = tape.add(tape.add(policy_loss, tape.scale(value_loss, cfg.value_loss_coef)),
                        tape.scale(mean_entropy, -alpha));

  PPOLossResult out;
  out.steps = S;
  out.loss = tape.value(total)(0, 0);
  out.policy_loss = tape.value(policy_loss)(0, 0);
  out.value_loss = tape.value(value_loss)(0, 0);
  out.mean_entropy = tape.value(mean_entropy)(0, 0);
  const Matrix& rv = tape.value(ratio);
  out.ratio_sum = rv.sum();
  for (int i = 0; i < S; ++i) {
    if (rv(i, 0) < 1.0 - cfg.clip || rv(i, 0) > 1.0 + cfg.clip) out.clip_count += 1;
  }
  out.w_sum = w.sum();
  out.w_max = S > 0 ? w.maxCoeff() : 0;
  out.is_weights = std::move(w);

  if (want_grads) {
    if (!std::isfinite(out.loss)) throw ProtocolError("ppo_loss: non-finite loss");
    tape.backward(total);
    out.grads.reserve(tp.ids.size());
    for (auto id : tp.ids) out.grads.push_back(tape.grad(id));
  }
  return out;
}

Matrix Learner::batch_h0(const RolloutView& view, const PackedBatch& batch) const {
  Matrix h0(static_cast<int>(batch.seqs.size()), view.hidden_dim);
  for (std::size_t s = 0; s < batch.seqs.size(); ++s) {
    const SequenceDescriptor& d = batch.seqs[s];
    Matrix h = view.h0.row(d.h0_index);
    for (int t = 0; t < d.skip; ++t) {
      h = act(params_, view.obs.row(d.parent_start_offset + t), h).h_new;
    }
    h0.row(s) = h;
  }
  return h0;
}

PPOLossResult Learner::run_minibatch(const RolloutView& view, const PackedBatch& batch,
                                     Scalar lr) {
  Matrix h0 = batch_h0(view, batch);
  PPOLossResult res = ppo_loss(params_, view, batch, cfg_, entropy_.alpha, h0, true);

  if (grad_hook) grad_hook(res.grads);
  adam_step(adam_, params_, res.grads, lr);
  params_.clamp_log_std();
  if (!params_.all_finite()) throw ProtocolError("update: non-finite parameters");

  entropy_.update(entropy_hook ? entropy_hook(res.mean_entropy) : res.mean_entropy);
  return res;
}

TrainStats Learner::update(RolloutView& view) {
  compute_gae(view, cfg_.gamma, cfg_.gae_lambda);
  const Scalar lr = schedule_.lr_at(consumed_steps_);

  TrainStats out;
  out.update_index = update_index_;
  out.steps = view.size();
  out.fresh_steps = view.fresh_steps();
  out.stale_steps = view.stale_steps;
  out.lr = lr;

  Scalar ratio_sum = 0, clip_count = 0, w_sum = 0;
  long total_steps = 0;
  int batches = 0;

  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    const std::uint64_t seed = rng::mix(rng::mix(run_seed_, update_index_), epoch);
    auto groups = split_minibatches(view, cfg_.minibatches, seed);
    for (const auto& g : groups) {
      PackedBatch batch = pack(view, g);
      PPOLossResult st = run_minibatch(view, batch, lr);
      out.loss += st.loss;
      out.policy_loss += st.policy_loss;
      out.value_loss += st.value_loss;
      out.entropy += st.mean_entropy;
      ratio_sum += st.ratio_sum;
      clip_count += st.clip_count;
      w_sum += st.w_sum;
      out.max_is_weight = std::max(out.max_is_weight, st.w_max);
      total_steps += st.steps;
      ++batches;
    }
  }

  out.loss /= batches;
  out.policy_loss /= batches;
  out.value_loss /= batches;
  out.entropy /= batches;
  out.entropy_loss = entropy_loss_value(out.entropy, entropy_);
  out.mean_ratio = ratio_sum / static_cast<Scalar>(total_steps);
  out.clip_fraction = clip_count / static_cast<Scalar>(total_steps);
  out.mean_is_weight = w_sum / static_cast<Scalar>(total_steps);
  out.alpha = entropy_.alpha;

  consumed_steps_ += view.fresh_steps();
  ++update_index_;
  return out;
}

}  // namespace ver
