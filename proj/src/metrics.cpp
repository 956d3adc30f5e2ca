#include "ver/metrics.hpp"

#include <nlohmann/json.hpp>

namespace ver {

using nlohmann::json;

JsonlWriter::JsonlWriter(const std::string& path) : out_(path) {
  if (!out_) throw ConfigError("cannot open metrics file: " + path);
}

void JsonlWriter::write(const json& j) {
  out_ << j.dump() << "\n";
  out_.flush();
}

json to_json(const TimingRecord& rec) {
  json j;
  j["kind"] = "rollout";
  j["rollout"] = rec.rollout_index;
  j["regime"] = rec.regime;
  j["wall_time"] = rec.wall_time;
  j["learn_time"] = rec.learn_time;
  j["steps"] = rec.steps;
  j["carryover_in"] = rec.carryover_in;
  j["deficit"] = rec.deficit;
  j["per_env_counts"] = rec.per_env_counts;
  j["idle_times"] = rec.idle_times;
  j["batch_sizes"] = rec.batch_sizes;
  j["snapshot_version"] = rec.snapshot_version;
  return j;
}

json to_json(const TrainStats& st) {
  json j;
  j["kind"] = "update";
  j["update"] = st.update_index;
  j["steps"] = st.steps;
  j["stale_steps"] = st.stale_steps;
  j["loss"] = st.loss;
  j["policy_loss"] = st.policy_loss;
  j["value_loss"] = st.value_loss;
  j["entropy"] = st.entropy;
  j["entropy_loss"] = st.entropy_loss;
  j["mean_ratio"] = st.mean_ratio;
  j["clip_fraction"] = st.clip_fraction;
  j["mean_is_weight"] = st.mean_is_weight;
  j["max_is_weight"] = st.max_is_weight;
  j["alpha"] = st.alpha;
  j["lr"] = st.lr;
  return j;
}

}  // namespace ver
