#include "ver/rollout.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cassert>
#include <istream>
#include <ostream>
#include <string>

namespace ver {

using nlohmann::json;

void RolloutView::restale(std::uint64_t learner_version) {
  for (int i = 0; i < size(); ++i) {
    if (version[i] != learner_version && !stale[i]) {
      stale[i] = 1;
      ++stale_steps;
    }
  }
}

RolloutBuffer::RolloutBuffer(Config cfg) : cfg_(cfg) {
  per_env_counts_.assign(cfg_.N, 0);
  env_prev_done_.assign(cfg_.N, 0);
  carryover_.resize(cfg_.N);
  bootstrap_ = Vector::Zero(cfg_.N);
  bootstrap_valid_.assign(cfg_.N, 0);
  steps_.reserve(capacity());
}

int RolloutBuffer::carryover_count() const {
  int n = 0;
  for (const auto& c : carryover_) n += c.has_value() ? 1 : 0;
  return n;
}

void RolloutBuffer::begin_rollout(std::uint64_t snapshot_version) {
  open_ = true;
  snapshot_version_ = snapshot_version;
  steps_.clear();
  env_slots_.assign(cfg_.N, {});
  std::fill(per_env_counts_.begin(), per_env_counts_.end(), 0);
  std::fill(env_prev_done_.begin(), env_prev_done_.end(), 0);
  bootstrap_.setZero();
  std::fill(bootstrap_valid_.begin(), bootstrap_valid_.end(), 0);
  collect_time_ = 0;
  // carryover steps are consumed first, in env order
  for (int e = 0; e < cfg_.N && open_; ++e) {
    if (carryover_[e]) {
      EnvStepRecord rec = std::move(*carryover_[e]);
      carryover_[e].reset();
      commit(rec);
    }
  }
}

AppendOutcome RolloutBuffer::append_step(const EnvStepRecord& rec) {
  if (rec.env_index < 0 || rec.env_index >= cfg_.N) {
    throw ProtocolError("append_step: env_index out of range");
  }
  if (!open_) {
    if (cfg_.mode == RolloutMode::Variable) {
      if (carryover_[rec.env_index]) {
        throw ProtocolError("append_step: two pending carryovers for env " +
                            std::to_string(rec.env_index));
      }
      carryover_[rec.env_index] = rec;
    }
    return AppendOutcome::RolloutFull;
  }
  if (env_at_cap(rec.env_index)) {
    return AppendOutcome::RolloutFull;  // env paused until the next rollout
  }
  return commit(rec);
}

AppendOutcome RolloutBuffer::commit(const EnvStepRecord& rec) {
  const int slot = static_cast<int>(steps_.size());
  steps_.push_back(rec);
  env_slots_[rec.env_index].push_back(slot);
  ++per_env_counts_[rec.env_index];

  if (cfg_.mode == RolloutMode::Variable) {
    if (committed() >= capacity()) open_ = false;
  } else {
    bool all_full = true;
    for (int e = 0; e < cfg_.N; ++e) all_full &= per_env_counts_[e] >= cfg_.T;
    if (all_full) open_ = false;
  }
  return AppendOutcome::Accepted;
}

void RolloutBuffer::force_close() { open_ = false; }

void RolloutBuffer::set_bootstrap(int env, Scalar value) {
  bootstrap_[env] = value;
  bootstrap_valid_[env] = 1;
}

RolloutView RolloutBuffer::close_rollout() {
  if (steps_.empty()) throw ProtocolError("close_rollout: buffer is empty");
  if (open_) throw ProtocolError("close_rollout: buffer still open (force_close for preemption)");

  const int s = committed();
  RolloutView v;
  v.T = cfg_.T;
  v.N = cfg_.N;
  v.action_kind = cfg_.action_kind;
  v.obs_dim = cfg_.obs_dim;
  v.act_dim = cfg_.act_dim;
  v.hidden_dim = cfg_.hidden_dim;
  v.obs.resize(s, cfg_.obs_dim);
  if (cfg_.action_kind == ActionKind::Continuous) {
    v.act_cont.resize(s, cfg_.act_dim);
  } else {
    v.act_disc.resize(s);
  }
  v.log_prob.resize(s);
  v.value.resize(s);
  v.reward.resize(s);
  v.latency.resize(s);
  v.advantage = Vector::Zero(s);
  v.returns = Vector::Zero(s);
  v.done.resize(s);
  v.stale.assign(s, 0);
  v.replayed.assign(s, 0);
  v.env_index.resize(s);
  v.seq_of_slot.resize(s);
  v.episode_index.resize(s);
  v.step_in_episode.resize(s);
  v.version.resize(s);
  v.per_env_counts = per_env_counts_;
  v.env_bootstrap = bootstrap_;
  v.env_bootstrap_valid = bootstrap_valid_;
  v.deficit = capacity() - s;
  v.snapshot_version = snapshot_version_;
  v.collect_wall_time = collect_time_;

  std::vector<Vector> h0_rows;
  int offset = 0;
  for (int e = 0; e < cfg_.N; ++e) {
    bool start_seq = true;
    for (int k = 0; k < static_cast<int>(env_slots_[e].size()); ++k) {
      const EnvStepRecord& rec = steps_[env_slots_[e][k]];
      if (start_seq) {
        SequenceDescriptor d;
        d.seq_id = next_seq_id_++;
        d.env_index = e;
        d.length = 0;
        d.start_offset = offset;
        d.parent_start_offset = offset;
        d.h0_index = static_cast<int>(h0_rows.size());
        Vector h = rec.h_before;
        if (h.size() != cfg_.hidden_dim) h = Vector::Zero(cfg_.hidden_dim);
        h0_rows.push_back(std::move(h));
        v.seqs.push_back(d);
        start_seq = false;
      }
      SequenceDescriptor& d = v.seqs.back();
      ++d.length;

      v.obs.row(offset) = rec.obs.transpose();
      if (cfg_.action_kind == ActionKind::Continuous) {
        v.act_cont.row(offset) = rec.action.values.transpose();
      } else {
        v.act_disc[offset] = rec.action.index;
      }
      v.log_prob[offset] = rec.log_prob;
      v.value[offset] = rec.value;
      v.reward[offset] = rec.reward;
      v.latency[offset] = rec.latency;
      v.done[offset] = rec.done ? 1 : 0;
      v.env_index[offset] = e;
      v.seq_of_slot[offset] = static_cast<int>(v.seqs.size()) - 1;
      v.episode_index[offset] = rec.episode_index;
      v.step_in_episode[offset] = rec.step_in_episode;
      v.version[offset] = rec.snapshot_version;
      ++offset;

      if (rec.done) start_seq = true;
    }
  }
  v.h0.resize(static_cast<int>(h0_rows.size()), cfg_.hidden_dim);
  for (int i = 0; i < static_cast<int>(h0_rows.size()); ++i) {
    v.h0.row(i) = h0_rows[i].transpose();
  }
  return v;
}

namespace {

void append_rows(Matrix& dst, const Matrix& src, int src_begin, int count) {
  const int old = static_cast<int>(dst.rows());
  dst.conservativeResize(old + count, src.cols());
  dst.middleRows(old, count) = src.middleRows(src_begin, count);
}

void append_vals(Vector& dst, const Vector& src, int src_begin, int count) {
  const int old = static_cast<int>(dst.size());
  dst.conservativeResize(old + count);
  dst.segment(old, count) = src.segment(src_begin, count);
}

}  // namespace

void backfill_stale(RolloutView& view, const RolloutView& prev, int deficit) {
  if (deficit == 0) return;
  if (deficit > prev.size()) {
    throw ProtocolError("backfill_stale: deficit exceeds previous rollout size");
  }

  int max_id = 0;
  for (const auto& d : view.seqs) max_id = std::max(max_id, d.seq_id);

  // fresh sequences first; fall back to already-stale ones if needed
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(prev.seqs.size()); ++i) {
    if (!prev.seqs[i].stale) order.push_back(i);
  }
  for (int i = 0; i < static_cast<int>(prev.seqs.size()); ++i) {
    if (prev.seqs[i].stale) order.push_back(i);
  }

  int remaining = deficit;
  for (int idx : order) {
    if (remaining == 0) break;
    const SequenceDescriptor& src = prev.seqs[idx];
    const int take = std::min(src.length, remaining);
    const int dst_offset = view.size();

    SequenceDescriptor d;
    d.seq_id = ++max_id;
    d.env_index = src.env_index;
    d.length = take;
    d.start_offset = dst_offset;
    d.parent_start_offset = dst_offset;
    d.h0_index = static_cast<int>(view.h0.rows());
    d.stale = true;
    view.h0.conservativeResize(view.h0.rows() + 1, Eigen::NoChange);
    view.h0.row(view.h0.rows() - 1) = prev.h0.row(src.h0_index);

    append_rows(view.obs, prev.obs, src.start_offset, take);
    if (view.action_kind == ActionKind::Continuous) {
      append_rows(view.act_cont, prev.act_cont, src.start_offset, take);
    } else {
      view.act_disc.insert(view.act_disc.end(),
                           prev.act_disc.begin() + src.start_offset,
                           prev.act_disc.begin() + src.start_offset + take);
    }
    append_vals(view.log_prob, prev.log_prob, src.start_offset, take);
    append_vals(view.value, prev.value, src.start_offset, take);
    append_vals(view.reward, prev.reward, src.start_offset, take);
    append_vals(view.latency, prev.latency, src.start_offset, take);
    append_vals(view.advantage, prev.advantage, src.start_offset, take);
    append_vals(view.returns, prev.returns, src.start_offset, take);
    const int seq_index = static_cast<int>(view.seqs.size());
    for (int k = 0; k < take; ++k) {
      const int sp = src.start_offset + k;
      view.done.push_back(prev.done[sp]);
      view.stale.push_back(1);
      view.replayed.push_back(1);
      view.env_index.push_back(prev.env_index[sp]);
      view.seq_of_slot.push_back(seq_index);
      view.episode_index.push_back(prev.episode_index[sp]);
      view.step_in_episode.push_back(prev.step_in_episode[sp]);
      view.version.push_back(prev.version[sp]);
    }
    view.seqs.push_back(d);
    view.stale_steps += take;
    view.replayed_steps += take;
    remaining -= take;
  }
  assert(remaining == 0);
}

namespace {

json vec_to_json(const Vector& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vector vec_from_json(const json& a) {
  Vector v(a.size());
  for (int i = 0; i < static_cast<int>(a.size()); ++i) v[i] = a[i].get<Scalar>();
  return v;
}

}  // namespace

void dump_view(const RolloutView& v, std::ostream& out) {
  json meta;
  meta["type"] = "meta";
  meta["T"] = v.T;
  meta["N"] = v.N;
  meta["action_kind"] = v.action_kind == ActionKind::Discrete ? "discrete" : "continuous";
  meta["obs_dim"] = v.obs_dim;
  meta["act_dim"] = v.act_dim;
  meta["hidden_dim"] = v.hidden_dim;
  meta["deficit"] = v.deficit;
  meta["stale_steps"] = v.stale_steps;
  meta["replayed_steps"] = v.replayed_steps;
  meta["snapshot_version"] = v.snapshot_version;
  meta["collect_wall_time"] = v.collect_wall_time;
  meta["per_env_counts"] = v.per_env_counts;
  meta["env_bootstrap"] = vec_to_json(v.env_bootstrap);
  meta["env_bootstrap_valid"] = v.env_bootstrap_valid;
  out << meta.dump() << "\n";

  for (const auto& d : v.seqs) {
    json s;
    s["type"] = "seq";
    s["seq_id"] = d.seq_id;
    s["env"] = d.env_index;
    s["length"] = d.length;
    s["start_offset"] = d.start_offset;
    s["stale"] = d.stale;
    s["h0"] = vec_to_json(v.h0.row(d.h0_index).transpose());
    out << s.dump() << "\n";
  }
  for (int i = 0; i < v.size(); ++i) {
    json s;
    s["type"] = "step";
    s["env"] = v.env_index[i];
    s["episode"] = v.episode_index[i];
    s["t"] = v.step_in_episode[i];
    s["obs"] = vec_to_json(v.obs.row(i).transpose());
    if (v.action_kind == ActionKind::Discrete) {
      s["action"] = v.act_disc[i];
    } else {
      s["action"] = vec_to_json(v.act_cont.row(i).transpose());
    }
    s["log_prob"] = v.log_prob[i];
    s["value"] = v.value[i];
    s["reward"] = v.reward[i];
    s["done"] = static_cast<bool>(v.done[i]);
    s["stale"] = static_cast<bool>(v.stale[i]);
    s["replayed"] = static_cast<bool>(v.replayed[i]);
    s["latency"] = v.latency[i];
    s["seq"] = v.seq_of_slot[i];
    s["version"] = v.version[i];
    out << s.dump() << "\n";
  }
}

RolloutView load_view(std::istream& in) {
  RolloutView v;
  std::string line;
  std::vector<json> steps;
  std::vector<json> seqs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    const std::string type = j.at("type");
    if (type == "meta") {
      v.T = j.at("T");
      v.N = j.at("N");
      v.action_kind = j.at("action_kind") == "discrete" ? ActionKind::Discrete
                                                        : ActionKind::Continuous;
      v.obs_dim = j.at("obs_dim");
      v.act_dim = j.at("act_dim");
      v.hidden_dim = j.at("hidden_dim");
      v.deficit = j.at("deficit");
      v.stale_steps = j.at("stale_steps");
      v.replayed_steps = j.value("replayed_steps", 0);
      v.snapshot_version = j.at("snapshot_version");
      v.collect_wall_time = j.at("collect_wall_time");
      v.per_env_counts = j.at("per_env_counts").get<std::vector<int>>();
      v.env_bootstrap = vec_from_json(j.at("env_bootstrap"));
      v.env_bootstrap_valid = j.at("env_bootstrap_valid").get<std::vector<std::uint8_t>>();
    } else if (type == "seq") {
      seqs.push_back(std::move(j));
    } else if (type == "step") {
      steps.push_back(std::move(j));
    }
  }

  const int s = static_cast<int>(steps.size());
  v.obs.resize(s, v.obs_dim);
  if (v.action_kind == ActionKind::Continuous) v.act_cont.resize(s, v.act_dim);
  else v.act_disc.resize(s);
  v.log_prob.resize(s);
  v.value.resize(s);
  v.reward.resize(s);
  v.latency.resize(s);
  v.advantage = Vector::Zero(s);
  v.returns = Vector::Zero(s);
  v.done.resize(s);
  v.stale.resize(s);
  v.replayed.assign(s, 0);
  v.env_index.resize(s);
  v.seq_of_slot.resize(s);
  v.episode_index.resize(s);
  v.step_in_episode.resize(s);
  v.version.resize(s);
  for (int i = 0; i < s; ++i) {
    const json& j = steps[i];
    v.obs.row(i) = vec_from_json(j.at("obs")).transpose();
    if (v.action_kind == ActionKind::Discrete) v.act_disc[i] = j.at("action");
    else v.act_cont.row(i) = vec_from_json(j.at("action")).transpose();
    v.log_prob[i] = j.at("log_prob");
    v.value[i] = j.at("value");
    v.reward[i] = j.at("reward");
    v.done[i] = j.at("done").get<bool>() ? 1 : 0;
    v.stale[i] = j.at("stale").get<bool>() ? 1 : 0;
    v.replayed[i] = j.value("replayed", false) ? 1 : 0;
    v.latency[i] = j.at("latency");
    v.env_index[i] = j.at("env");
    v.seq_of_slot[i] = j.at("seq");
    v.episode_index[i] = j.at("episode");
    v.step_in_episode[i] = j.at("t");
    v.version[i] = j.at("version");
  }
  v.h0.resize(static_cast<int>(seqs.size()), v.hidden_dim);
  for (int i = 0; i < static_cast<int>(seqs.size()); ++i) {
    const json& j = seqs[i];
    SequenceDescriptor d;
    d.seq_id = j.at("seq_id");
    d.env_index = j.at("env");
    d.length = j.at("length");
    d.start_offset = j.at("start_offset");
    d.parent_start_offset = d.start_offset;
    d.h0_index = i;
    d.stale = j.at("stale").get<bool>();
    v.h0.row(i) = vec_from_json(j.at("h0")).transpose();
    v.seqs.push_back(d);
  }
  return v;
}

}  // namespace ver
