#pragma once

#include "ver/nn.hpp"
#include "ver/packseq.hpp"
#include "ver/rollout.hpp"
#include "ver/types.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace ver {

struct PPOConfig {
  Scalar gamma = 0.99;
  Scalar gae_lambda = 0.95;
  Scalar clip = 0.2;
  int epochs = 3;
  int minibatches = 2;
  Scalar value_loss_coef = 0.5;
  Scalar is_cap = 1.0;  // truncated importance-sampling weight cap
};

/// Minimum-entropy constraint with a learned coefficient. The loss
/// alpha * (target - sg(H)) - sg(alpha) * H is minimized wrt the policy; the
/// coefficient itself follows the Lagrange dual (ascent on alpha, so alpha
/// grows while entropy sits below the target) and is clamped to bounds after
/// every step.
struct EntropyController {
  Scalar alpha = 1e-3;
  Scalar target = 0.0;
  Scalar lower = 1e-4;
  Scalar upper = 1.0;
  Scalar lr = 2.5e-4;

  void update(Scalar mean_entropy) {
    alpha += lr * (target - mean_entropy);
    alpha = std::min(std::max(alpha, lower), upper);
  }
};

/// Numeric value of the entropy term (gradients are handled by the tape for
/// the policy side and by EntropyController::update for alpha).
inline Scalar entropy_loss_value(Scalar mean_entropy, const EntropyController& c) {
  return c.alpha * (c.target - mean_entropy) - c.alpha * mean_entropy;
}

/// delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t
/// A_t = delta_t + gamma*lambda*(1-done_t)*A_{t+1},  R_t = A_t + V_t
/// Runs per env over newly collected slots; replayed slots keep the
/// advantages they were assigned when their rollout was fresh. Throws if a
/// truncated tail has no bootstrap value.
void compute_gae(RolloutView& view, Scalar gamma, Scalar lambda);

struct TrainStats {
  long update_index = 0;
  int steps = 0;
  int fresh_steps = 0;
  int stale_steps = 0;
  Scalar loss = 0;
  Scalar policy_loss = 0;
  Scalar value_loss = 0;
  Scalar entropy = 0;
  Scalar entropy_loss = 0;
  Scalar mean_ratio = 0;
  Scalar clip_fraction = 0;
  Scalar mean_is_weight = 0;
  Scalar max_is_weight = 0;
  Scalar alpha = 0;
  Scalar lr = 0;
};

/// Clipped-surrogate PPO loss over one packed mini-batch.
///   ratio = exp(logp_new - logp_stored)
///   surrogate = min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)
///   w = stopgrad(min(ratio, is_cap))   (behavior = stored log-prob)
///   loss = -mean(w*surrogate) + c_v * mean(0.5*(V-R)^2) - alpha*mean(H)
/// Returns the gradients wrt every parameter tensor in tensors() order.
struct PPOLossResult {
  Scalar loss = 0;
  Scalar policy_loss = 0;
  Scalar value_loss = 0;
  Scalar mean_entropy = 0;
  Scalar ratio_sum = 0;
  Scalar clip_count = 0;
  Scalar w_sum = 0;
  Scalar w_max = 0;
  int steps = 0;
  Matrix is_weights;  // the applied per-step weights (S x 1)
  std::vector<Matrix> grads;
};
/// `frozen_is_weights`, when given, replaces the stop-gradient weight
/// computation (finite-difference checks must hold the stop-gradient fixed).
PPOLossResult ppo_loss(const PolicyParams& params, const RolloutView& view,
                       const PackedBatch& batch, const PPOConfig& cfg, Scalar alpha,
                       const Matrix& h0_sorted, bool want_grads = true,
                       const Matrix* frozen_is_weights = nullptr);

/// PPO over packed mini-batches. Owns parameters, optimizer state and the
/// entropy coefficient; grad_hook (when set) sees the flat gradient list
/// before the Adam step, which is where replicas average.
class Learner {
 public:
  Learner(PolicyParams params, PPOConfig cfg, EntropyController entropy,
          CosineSchedule schedule, std::uint64_t run_seed);

  TrainStats update(RolloutView& view);

  const PolicyParams& params() const { return params_; }
  PolicyParams& mutable_params() { return params_; }
  const AdamState& adam() const { return adam_; }
  AdamState& mutable_adam() { return adam_; }
  EntropyController& entropy() { return entropy_; }
  const PPOConfig& config() const { return cfg_; }
  long consumed_steps() const { return consumed_steps_; }
  long update_index() const { return update_index_; }
  void set_consumed_steps(long n) { consumed_steps_ = n; }
  void set_update_index(long n) { update_index_ = n; }

  std::function<void(std::vector<Matrix>&)> grad_hook;
  /// Lets replicas agree on the batch entropy driving the alpha update.
  std::function<Scalar(Scalar)> entropy_hook;

  /// Initial states for a packed batch, replaying split tails without grads.
  Matrix batch_h0(const RolloutView& view, const PackedBatch& batch) const;

 private:
  PPOLossResult run_minibatch(const RolloutView& view, const PackedBatch& batch, Scalar lr);

  PolicyParams params_;
  PPOConfig cfg_;
  EntropyController entropy_;
  CosineSchedule schedule_;
  AdamState adam_;
  std::uint64_t run_seed_;
  long consumed_steps_ = 0;
  long update_index_ = 0;
};

}  // namespace ver
