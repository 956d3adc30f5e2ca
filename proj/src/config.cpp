#include "ver/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace ver {

namespace {

struct TomlValue {
  enum Kind { Bool, Number, String, NumberArray, StringArray } kind = Number;
  bool b = false;
  double num = 0;
  std::string str;
  std::vector<double> nums;
  std::vector<std::string> strs;
};

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

// strips a trailing comment that is not inside a string literal
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    else if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

TomlValue parse_scalar(const std::string& raw, int line_no) {
  TomlValue v;
  if (raw.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty value");
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"') {
      throw ConfigError("line " + std::to_string(line_no) + ": unterminated string");
    }
    v.kind = TomlValue::String;
    v.str = raw.substr(1, raw.size() - 2);
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = TomlValue::Bool;
    v.b = raw == "true";
    return v;
  }
  try {
    std::size_t used = 0;
    v.num = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    v.kind = TomlValue::Number;
    return v;
  } catch (...) {
    throw ConfigError("line " + std::to_string(line_no) + ": cannot parse value '" + raw + "'");
  }
}

TomlValue parse_value(const std::string& raw, int line_no) {
  if (!raw.empty() && raw.front() == '[') {
    if (raw.back() != ']') {
      throw ConfigError("line " + std::to_string(line_no) + ": unterminated array");
    }
    TomlValue v;
    std::string inner = trim(raw.substr(1, raw.size() - 2));
    v.kind = TomlValue::NumberArray;
    if (inner.empty()) return v;
    std::vector<std::string> parts;
    std::string cur;
    bool in_str = false;
    for (char c : inner) {
      if (c == '"') in_str = !in_str;
      if (c == ',' && !in_str) {
        parts.push_back(trim(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    parts.push_back(trim(cur));
    for (const auto& p : parts) {
      TomlValue s = parse_scalar(p, line_no);
      if (s.kind == TomlValue::String) {
        v.kind = TomlValue::StringArray;
        v.strs.push_back(s.str);
      } else {
        v.nums.push_back(s.num);
      }
    }
    return v;
  }
  return parse_scalar(raw, line_no);
}

using TomlMap = std::map<std::string, TomlValue>;

TomlMap parse_toml(const std::string& text) {
  TomlMap out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    const std::string full = section.empty() ? key : section + "." + key;
    out[full] = parse_value(value, line_no);
  }
  return out;
}

class Reader {
 public:
  explicit Reader(TomlMap map) : map_(std::move(map)) {}

  bool get(const std::string& key, bool def) {
    auto it = take(key);
    if (!it) return def;
    if (it->kind != TomlValue::Bool) throw ConfigError(key + ": expected a boolean");
    return it->b;
  }
  double get(const std::string& key, double def) {
    auto it = take(key);
    if (!it) return def;
    if (it->kind != TomlValue::Number) throw ConfigError(key + ": expected a number");
    return it->num;
  }
  int get(const std::string& key, int def) { return static_cast<int>(get(key, double(def))); }
  long get(const std::string& key, long def) { return static_cast<long>(get(key, double(def))); }
  std::uint64_t get(const std::string& key, std::uint64_t def) {
    return static_cast<std::uint64_t>(get(key, double(def)));
  }
  std::string get(const std::string& key, const std::string& def) {
    auto it = take(key);
    if (!it) return def;
    if (it->kind != TomlValue::String) throw ConfigError(key + ": expected a string");
    return it->str;
  }
  std::vector<double> get(const std::string& key, const std::vector<double>& def) {
    auto it = take(key);
    if (!it) return def;
    if (it->kind != TomlValue::NumberArray) throw ConfigError(key + ": expected a number array");
    return it->nums;
  }

  std::vector<std::string> leftover() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : map_) out.push_back(k);
    return out;
  }

 private:
  const TomlValue* take(const std::string& key) {
    auto it = map_.find(key);
    if (it == map_.end()) return nullptr;
    taken_.push_back(key);
    last_ = it->second;
    map_.erase(it);
    return &last_;
  }
  TomlMap map_;
  TomlValue last_;
  std::vector<std::string> taken_;
};

}  // namespace

RunConfig parse_config(const std::string& text) {
  TomlMap map = parse_toml(text);
  if (map.find("env.task") == map.end()) {
    throw ConfigError("missing required config key: env.task");
  }
  Reader r(std::move(map));
  RunConfig c;
  c.regime = r.get("run.regime", c.regime);
  c.overlap = r.get("run.overlap", c.overlap);
  c.replicas = r.get("run.replicas", c.replicas);
  c.seed = r.get("run.seed", c.seed);
  c.total_steps = r.get("run.total_steps", c.total_steps);
  c.updates = r.get("run.updates", c.updates);
  c.clock = r.get("run.clock", c.clock);
  c.out_dir = r.get("run.out_dir", c.out_dir);
  c.dump_rollouts = r.get("run.dump_rollouts", c.dump_rollouts);
  c.checkpoint_every = r.get("run.checkpoint_every", c.checkpoint_every);

  c.task = r.get("env.task", c.task);
  c.horizon = r.get("env.horizon", c.horizon);
  c.max_steps = r.get("env.max_steps", c.max_steps);
  c.step_size = r.get("env.step_size", c.step_size);
  c.goal_radius = r.get("env.goal_radius", c.goal_radius);
  c.step_penalty = r.get("env.step_penalty", c.step_penalty);
  c.episode_len = r.get("env.episode_len", c.episode_len);

  c.latency_enabled = r.get("env.latency.enabled", c.latency_enabled);
  c.latency_base = r.get("env.latency.base", c.latency_base);
  c.action_sigma = r.get("env.latency.action_sigma", c.action_sigma);
  c.episode_sigma = r.get("env.latency.episode_sigma", c.episode_sigma);
  c.action_multipliers = r.get("env.latency.action_multipliers", c.action_multipliers);
  c.env_scales = r.get("env.latency.env_scales", c.env_scales);
  c.replica_scales = r.get("env.latency.replica_scales", c.replica_scales);

  c.T = r.get("rollout.T", c.T);
  c.N = r.get("rollout.N", c.N);
  c.envs_per_worker = r.get("rollout.envs_per_worker", c.envs_per_worker);
  c.inference_workers = r.get("rollout.inference_workers", c.inference_workers);

  c.min_requests = r.get("batching.min_requests", c.min_requests);
  c.max_requests = r.get("batching.max_requests", c.max_requests);
  c.max_wait = r.get("batching.max_wait", c.max_wait);
  c.inference_base = r.get("batching.inference_base", c.inference_base);
  c.inference_per_item = r.get("batching.inference_per_item", c.inference_per_item);

  c.gamma = r.get("ppo.gamma", c.gamma);
  c.gae_lambda = r.get("ppo.gae_lambda", c.gae_lambda);
  c.clip = r.get("ppo.clip", c.clip);
  c.epochs = r.get("ppo.epochs", c.epochs);
  c.minibatches = r.get("ppo.minibatches", c.minibatches);
  c.value_loss_coef = r.get("ppo.value_loss_coef", c.value_loss_coef);
  c.is_cap = r.get("ppo.is_cap", c.is_cap);

  c.entropy_initial = r.get("entropy.initial", c.entropy_initial);
  c.entropy_lower = r.get("entropy.lower", c.entropy_lower);
  c.entropy_upper = r.get("entropy.upper", c.entropy_upper);
  c.entropy_target = r.get("entropy.target", c.entropy_target);
  c.entropy_lr = r.get("entropy.lr", c.entropy_lr);

  c.lr = r.get("optim.lr", c.lr);

  c.hidden = r.get("model.hidden", c.hidden);
  c.encoder = r.get("model.encoder", c.encoder);

  c.preempt = r.get("distributed.preempt", c.preempt);
  c.preempt_fraction = r.get("distributed.preempt_fraction", c.preempt_fraction);
  c.per_replica_budget = r.get("distributed.per_replica_budget", c.per_replica_budget);

  c.bench_rollouts = r.get("bench.rollouts", c.bench_rollouts);
  c.bench_warmup = r.get("bench.warmup", c.bench_warmup);
  c.bench_learn = r.get("bench.learn", c.bench_learn);

  const auto leftover = r.leftover();
  if (!leftover.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : leftover) msg += " " + k;
    throw ConfigError(msg);
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

namespace {

std::string fmt_num(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

std::string fmt_array(const std::vector<double>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fmt_num(v[i]);
  }
  return out + "]";
}

}  // namespace

std::string serialize_config(const RunConfig& c) {
  std::ostringstream o;
  o << "[run]\n";
  o << "regime = \"" << c.regime << "\"\n";
  o << "overlap = " << (c.overlap ? "true" : "false") << "\n";
  o << "replicas = " << c.replicas << "\n";
  o << "seed = " << c.seed << "\n";
  o << "total_steps = " << c.total_steps << "\n";
  o << "updates = " << c.updates << "\n";
  o << "clock = \"" << c.clock << "\"\n";
  o << "out_dir = \"" << c.out_dir << "\"\n";
  o << "dump_rollouts = " << (c.dump_rollouts ? "true" : "false") << "\n";
  o << "checkpoint_every = " << c.checkpoint_every << "\n";
  o << "\n[env]\n";
  o << "task = \"" << c.task << "\"\n";
  o << "horizon = " << c.horizon << "\n";
  o << "max_steps = " << c.max_steps << "\n";
  o << "step_size = " << fmt_num(c.step_size) << "\n";
  o << "goal_radius = " << fmt_num(c.goal_radius) << "\n";
  o << "step_penalty = " << fmt_num(c.step_penalty) << "\n";
  o << "episode_len = " << c.episode_len << "\n";
  o << "\n[env.latency]\n";
  o << "enabled = " << (c.latency_enabled ? "true" : "false") << "\n";
  o << "base = " << fmt_num(c.latency_base) << "\n";
  o << "action_sigma = " << fmt_num(c.action_sigma) << "\n";
  o << "episode_sigma = " << fmt_num(c.episode_sigma) << "\n";
  o << "action_multipliers = " << fmt_array(c.action_multipliers) << "\n";
  o << "env_scales = " << fmt_array(c.env_scales) << "\n";
  o << "replica_scales = " << fmt_array(c.replica_scales) << "\n";
  o << "\n[rollout]\n";
  o << "T = " << c.T << "\n";
  o << "N = " << c.N << "\n";
  o << "envs_per_worker = " << c.envs_per_worker << "\n";
  o << "inference_workers = " << c.inference_workers << "\n";
  o << "\n[batching]\n";
  o << "min_requests = " << c.min_requests << "\n";
  o << "max_requests = " << c.max_requests << "\n";
  o << "max_wait = " << fmt_num(c.max_wait) << "\n";
  o << "inference_base = " << fmt_num(c.inference_base) << "\n";
  o << "inference_per_item = " << fmt_num(c.inference_per_item) << "\n";
  o << "\n[ppo]\n";
  o << "gamma = " << fmt_num(c.gamma) << "\n";
  o << "gae_lambda = " << fmt_num(c.gae_lambda) << "\n";
  o << "clip = " << fmt_num(c.clip) << "\n";
  o << "epochs = " << c.epochs << "\n";
  o << "minibatches = " << c.minibatches << "\n";
  o << "value_loss_coef = " << fmt_num(c.value_loss_coef) << "\n";
  o << "is_cap = " << fmt_num(c.is_cap) << "\n";
  o << "\n[entropy]\n";
  o << "initial = " << fmt_num(c.entropy_initial) << "\n";
  o << "lower = " << fmt_num(c.entropy_lower) << "\n";
  o << "upper = " << fmt_num(c.entropy_upper) << "\n";
  o << "target = " << fmt_num(c.entropy_target) << "\n";
  o << "lr = " << fmt_num(c.entropy_lr) << "\n";
  o << "\n[optim]\n";
  o << "lr = " << fmt_num(c.lr) << "\n";
  o << "\n[model]\n";
  o << "hidden = " << c.hidden << "\n";
  o << "encoder = " << c.encoder << "\n";
  o << "\n[distributed]\n";
  o << "preempt = \"" << c.preempt << "\"\n";
  o << "preempt_fraction = " << fmt_num(c.preempt_fraction) << "\n";
  o << "per_replica_budget = " << (c.per_replica_budget ? "true" : "false") << "\n";
  o << "\n[bench]\n";
  o << "rollouts = " << c.bench_rollouts << "\n";
  o << "warmup = " << c.bench_warmup << "\n";
  o << "learn = " << (c.bench_learn ? "true" : "false") << "\n";
  return o.str();
}

std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> bad;
  auto req = [&](bool ok, const std::string& msg) {
    if (!ok) bad.push_back(msg);
  };
  req(c.regime == "sync" || c.regime == "nover" || c.regime == "ver",
      "run.regime must be one of sync|nover|ver");
  req(c.clock == "virtual" || c.clock == "real", "run.clock must be virtual|real");
  req(!(c.overlap && c.clock == "virtual"), "run.overlap requires run.clock = \"real\"");
  req(c.replicas >= 1, "run.replicas must be >= 1");
  req(!(c.replicas > 1 && c.clock == "virtual"),
      "run.replicas > 1 requires run.clock = \"real\"");
  req(c.total_steps > 0, "run.total_steps must be positive");
  req(c.T >= 1, "rollout.T must be >= 1");
  req(c.N >= 1, "rollout.N must be >= 1");
  req(c.envs_per_worker >= 1, "rollout.envs_per_worker must be >= 1");
  req(c.inference_workers >= 1, "rollout.inference_workers must be >= 1");
  req(c.minibatches >= 1, "ppo.minibatches must be >= 1");
  if (c.minibatches >= 1) {
    req((c.T * c.N) % c.minibatches == 0, "ppo.minibatches must divide T*N");
  }
  req(c.epochs >= 1, "ppo.epochs must be >= 1");
  req(c.gamma >= 0 && c.gamma <= 1, "ppo.gamma must be in [0,1]");
  req(c.gae_lambda >= 0 && c.gae_lambda <= 1, "ppo.gae_lambda must be in [0,1]");
  req(c.clip > 0, "ppo.clip must be positive");
  req(c.is_cap > 0, "ppo.is_cap must be positive");
  req(c.entropy_lower <= c.entropy_initial && c.entropy_initial <= c.entropy_upper,
      "entropy.initial must lie within [entropy.lower, entropy.upper]");
  req(c.entropy_lower > 0, "entropy.lower must be positive");
  req(c.lr >= 0, "optim.lr must be non-negative");
  req(c.hidden >= 1, "model.hidden must be >= 1");
  req(c.encoder >= 1, "model.encoder must be >= 1");
  req(c.min_requests >= 1, "batching.min_requests must be >= 1");
  req(c.max_requests == 0 ||
          (c.max_requests >= c.min_requests && c.max_requests <= c.N),
      "batching.max_requests must be 0 (auto) or in [min_requests, N]");
  req(c.min_requests <= c.N, "batching.min_requests must be <= N");
  req(c.max_wait > 0, "batching.max_wait must be positive");
  req(!c.latency_enabled || c.latency_base > 0,
      "env.latency.base must be positive when latency is enabled");
  req(c.task == "delayed_cue" || c.task == "reach2d" || c.task == "latency_only",
      "env.task must be one of delayed_cue|reach2d|latency_only");
  if (c.task == "delayed_cue") req(c.horizon >= 2, "env.horizon must be >= 2");
  if (c.task == "reach2d") {
    req(c.max_steps >= 1, "env.max_steps must be >= 1");
    req(c.step_size > 0, "env.step_size must be positive");
    req(c.goal_radius > 0, "env.goal_radius must be positive");
  }
  if (c.task == "latency_only") req(c.episode_len >= 1, "env.episode_len must be >= 1");
  req(c.preempt == "none" || c.preempt == "optimal" || c.preempt == "fixed_fraction",
      "distributed.preempt must be none|optimal|fixed_fraction");
  req(c.preempt_fraction > 0 && c.preempt_fraction <= 1,
      "distributed.preempt_fraction must be in (0,1]");
  req(c.bench_rollouts >= 1, "bench.rollouts must be >= 1");
  req(c.bench_warmup >= 0, "bench.warmup must be >= 0");
  return bad;
}

void validate_or_throw(const RunConfig& c) {
  auto bad = validate(c);
  if (!bad.empty()) {
    std::string msg = "invalid config:";
    for (const auto& m : bad) msg += "\n  - " + m;
    throw ConfigError(msg);
  }
}

TaskSpec to_task_spec(const RunConfig& c) {
  TaskSpec t;
  t.task = task_from_string(c.task);
  t.horizon = c.horizon;
  t.max_steps = c.max_steps;
  t.step_size = c.step_size;
  t.goal_radius = c.goal_radius;
  t.step_penalty = c.step_penalty;
  t.episode_len = c.episode_len;
  t.latency.enabled = c.latency_enabled;
  t.latency.base = c.latency_base;
  t.latency.action_sigma = c.action_sigma;
  t.latency.episode_sigma = c.episode_sigma;
  t.latency.action_multipliers.assign(c.action_multipliers.begin(), c.action_multipliers.end());
  t.latency.env_scales.assign(c.env_scales.begin(), c.env_scales.end());
  return t;
}

ModelConfig to_model_config(const RunConfig& c) {
  TaskSpec t = to_task_spec(c);
  ModelConfig m;
  m.obs_dim = t.obs_dim();
  m.encoder_dim = c.encoder;
  m.hidden_dim = c.hidden;
  m.action_kind = t.action_kind();
  m.num_actions = t.num_actions();
  m.act_dim = t.action_dim();
  return m;
}

RuntimeConfig to_runtime_config(const RunConfig& c) {
  RuntimeConfig r;
  r.T = c.T;
  r.N = c.N;
  r.regime = regime_from_string(c.regime);
  r.overlap = c.overlap;
  r.batching.min_requests = c.min_requests;
  r.batching.max_requests = c.max_requests;
  r.batching.max_wait = c.max_wait;
  r.envs_per_worker = c.envs_per_worker;
  r.inference_workers = c.inference_workers;
  r.seed = c.seed;
  r.task = to_task_spec(c);
  r.model = to_model_config(c);
  r.inference_base = c.inference_base;
  r.inference_per_item = c.inference_per_item;
  return r;
}

PPOConfig to_ppo_config(const RunConfig& c) {
  PPOConfig p;
  p.gamma = c.gamma;
  p.gae_lambda = c.gae_lambda;
  p.clip = c.clip;
  p.epochs = c.epochs;
  p.minibatches = c.minibatches;
  p.value_loss_coef = c.value_loss_coef;
  p.is_cap = c.is_cap;
  return p;
}

EntropyController to_entropy_controller(const RunConfig& c) {
  EntropyController e;
  e.alpha = c.entropy_initial;
  e.lower = c.entropy_lower;
  e.upper = c.entropy_upper;
  e.target = c.entropy_target;
  e.lr = c.entropy_lr;
  return e;
}

CosineSchedule to_schedule(const RunConfig& c) {
  return CosineSchedule{c.lr, c.total_steps};
}

DistributedConfig to_distributed_config(const RunConfig& c) {
  DistributedConfig d;
  d.replicas = c.replicas;
  d.preempt = preempt_from_string(c.preempt);
  d.preempt_fraction = c.preempt_fraction;
  d.per_replica_budget = c.per_replica_budget;
  d.replica_latency_scales.assign(c.replica_scales.begin(), c.replica_scales.end());
  return d;
}

}  // namespace ver
