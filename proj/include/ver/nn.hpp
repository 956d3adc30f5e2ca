#pragma once

#include "ver/rng.hpp"
#include "ver/tape.hpp"
#include "ver/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace ver {

struct ModelConfig {
  int obs_dim = 0;
  int encoder_dim = 64;
  int hidden_dim = 64;
  ActionKind action_kind = ActionKind::Discrete;
  int num_actions = 0;  // discrete
  int act_dim = 0;      // continuous
};

constexpr Scalar kLogStdMin = -5.0;
constexpr Scalar kLogStdMax = 2.0;

/// Two tanh dense layers, one gated recurrent layer, an action head
/// (logits or mean + state-independent log-std) and a scalar value head.
/// Biases and log_std are stored as 1 x n matrices so every tensor shares
/// one registry for the optimizer, AllReduce and checkpointing.
struct PolicyParams {
  ModelConfig cfg;

  Matrix enc_w1, enc_b1;
  Matrix enc_w2, enc_b2;
  Matrix gru_wr, gru_ur, gru_br;
  Matrix gru_wz, gru_uz, gru_bz;
  Matrix gru_wn, gru_un, gru_bn;
  Matrix head_w, head_b;
  Matrix log_std;  // 1 x act_dim, clamped to [kLogStdMin, kLogStdMax]
  Matrix value_w, value_b;

  static PolicyParams init(const ModelConfig& cfg, std::uint64_t seed);

  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;

  void clamp_log_std();
  bool all_finite() const;
};

/// Parameters frozen for one collection phase.
struct PolicySnapshot {
  PolicyParams params;
  std::uint64_t version = 0;
};
using SnapshotPtr = std::shared_ptr<const PolicySnapshot>;

/// Batched inference-path forward (no gradients).
struct ActResult {
  Matrix dist;   // B x A logits or B x act_dim mean
  Vector value;  // B
  Matrix h_new;  // B x H
};
ActResult act(const PolicyParams& p, const Matrix& obs, const Matrix& h);

/// Value-only forward for bootstrap evaluation.
Vector value_only(const PolicyParams& p, const Matrix& obs, const Matrix& h);

// Distribution helpers on the inference path (single row).
int sample_categorical(const RowVector& logits, CounterRng& rng);
Scalar categorical_log_prob(const RowVector& logits, int action);
Scalar categorical_entropy(const RowVector& logits);
Vector sample_gaussian(const RowVector& mean, const Matrix& log_std, CounterRng& rng);
Scalar gaussian_log_prob(const RowVector& mean, const Matrix& log_std, const Vector& action);
Scalar gaussian_entropy(const Matrix& log_std);

/// Parameter leaves registered on a tape. `ids` repeats them in tensors()
/// order for gradient collection.
struct TapeParams {
  Tape::NodeId enc_w1, enc_b1, enc_w2, enc_b2;
  Tape::NodeId gru_wr, gru_ur, gru_br, gru_wz, gru_uz, gru_bz, gru_wn, gru_un, gru_bn;
  Tape::NodeId head_w, head_b;
  Tape::NodeId log_std = -1;
  Tape::NodeId value_w, value_b;
  std::vector<Tape::NodeId> ids;
};
TapeParams register_params(Tape& tape, const PolicyParams& p);

/// Learning-path forward over a packed batch: per packed position the action
/// log-prob, entropy and value, each S x 1 in packed order.
struct PackedForward {
  Tape::NodeId log_prob = -1;
  Tape::NodeId entropy = -1;
  Tape::NodeId value = -1;
};
PackedForward forward_packed(Tape& tape, const TapeParams& tp, const ModelConfig& cfg,
                             const Matrix& obs_packed, const std::vector<int>& act_disc,
                             const Matrix& act_cont, const std::vector<int>& batch_sizes,
                             const std::vector<int>& offsets, const Matrix& h0_sorted);

/// Adam with per-tensor moments; bias-corrected, standard constants.
struct AdamState {
  std::vector<Matrix> m, v;
  long step = 0;
  Scalar beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};
AdamState make_adam(const PolicyParams& p);
void adam_step(AdamState& st, PolicyParams& p, const std::vector<Matrix>& grads, Scalar lr);

/// Cosine decay from base_lr to 0 over total_steps consumed env steps.
struct CosineSchedule {
  Scalar base_lr = 2.5e-4;
  long total_steps = 1;
  Scalar lr_at(long consumed) const;
};

nlohmann::json params_to_json(const PolicyParams& p);
PolicyParams params_from_json(const nlohmann::json& j);
nlohmann::json adam_to_json(const AdamState& st);
AdamState adam_from_json(const nlohmann::json& j, const PolicyParams& p);

}  // namespace ver
