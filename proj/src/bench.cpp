#include "ver/bench.hpp"

#include "ver/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>

namespace ver {

using nlohmann::json;

int log_level() {
  static const int level = [] {
    const char* v = std::getenv("VER_LOG_LEVEL");
    if (!v) return 1;
    const std::string s = v;
    if (s == "quiet") return 0;
    if (s == "debug") return 2;
    return 1;
  }();
  return level;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[ver] " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[ver:debug] " << msg << "\n";
}

namespace {

constexpr int kReturnWindow = 100;

class RollingReturn {
 public:
  void add(const std::vector<Scalar>& returns) {
    for (Scalar r : returns) {
      window_.push_back(r);
      if (window_.size() > kReturnWindow) window_.pop_front();
    }
  }
  Scalar mean() const {
    if (window_.empty()) return 0;
    return std::accumulate(window_.begin(), window_.end(), Scalar(0)) /
           static_cast<Scalar>(window_.size());
  }
  bool empty() const { return window_.empty(); }

 private:
  std::deque<Scalar> window_;
};

double now_wall() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct Sinks {
  std::unique_ptr<JsonlWriter> metrics;
  std::string prefix;
  explicit Sinks(const std::string& out_prefix) : prefix(out_prefix) {
    if (!out_prefix.empty()) {
      metrics = std::make_unique<JsonlWriter>(out_prefix + "_metrics.jsonl");
    }
  }
  void rollout(const TimingRecord& rec) {
    if (metrics) metrics->write(to_json(rec));
  }
  void update(const TrainStats& st, Scalar mean_return) {
    if (metrics) {
      json j = to_json(st);
      j["mean_return"] = mean_return;
      metrics->write(j);
    }
  }
  void dump(const RolloutView& view, long index) {
    if (prefix.empty()) return;
    std::ofstream out(prefix + "_rollout_" + std::to_string(index) + ".jsonl");
    dump_view(view, out);
  }
};

TrainResult train_single(const RunConfig& cfg, const std::string& out_prefix,
                         const std::function<void(const UpdateEvent&)>& on_update) {
  const bool real_clock = cfg.clock == "real";
  RuntimeConfig rt = to_runtime_config(cfg);
  rt.overlap = cfg.overlap;

  PolicyParams params = PolicyParams::init(rt.model, rng::mix(cfg.seed, 0x9a9a));
  Learner learner(params, to_ppo_config(cfg), to_entropy_controller(cfg),
                  to_schedule(cfg), rng::mix(cfg.seed, 0xF00d));

  auto snapshot_of = [&](std::uint64_t version) {
    auto s = std::make_shared<PolicySnapshot>();
    s->params = learner.params();
    s->version = version;
    return s;
  };

  Sinks sinks(out_prefix);
  RollingReturn rolling;
  ReturnTracker tracker(cfg.N);
  TrainResult result;
  const int target_updates = cfg.derived_updates();

  std::unique_ptr<VirtualDriver> vdrv;
  std::unique_ptr<ThreadedDriver> tdrv;
  if (real_clock) tdrv = std::make_unique<ThreadedDriver>(rt, snapshot_of(0));
  else vdrv = std::make_unique<VirtualDriver>(rt, snapshot_of(0));

  auto collect = [&](std::uint64_t version) -> std::pair<RolloutView, TimingRecord> {
    if (vdrv) return vdrv->run_rollout();
    tdrv->request_begin(snapshot_of(version));
    return tdrv->wait_rollout();
  };

  // overlapped mode primes rollout 0 and collects k+1 while learning on k
  std::optional<std::pair<RolloutView, TimingRecord>> pending;
  if (cfg.overlap && tdrv) {
    tdrv->request_begin(snapshot_of(0));
    pending = tdrv->wait_rollout();
  }

  for (int u = 0; u < target_updates; ++u) {
    std::pair<RolloutView, TimingRecord> got = [&] {
      if (!cfg.overlap) {
        if (vdrv && u > 0) vdrv->set_snapshot(snapshot_of(u));
        return collect(u);
      }
      // overlap: hand the driver the pre-update snapshot, learn on `pending`
      tdrv->request_begin(snapshot_of(u));
      auto cur = std::move(*pending);
      pending.reset();
      return cur;
    }();
    RolloutView& view = got.first;
    TimingRecord& rec = got.second;

    const auto t0 = std::chrono::steady_clock::now();
    view.restale(u);  // marks lagged data (overlap mode) for the IS cap
    auto returns = tracker.feed(view);
    rolling.add(returns);
    TrainStats stats = learner.update(view);
    const double learn_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.learn_time = learn_s;

    if (cfg.overlap && tdrv) pending = tdrv->wait_rollout();

    const long fresh = view.fresh_steps();
    result.steps += fresh;
    result.updates = u + 1;
    const double window_s = real_clock ? rec.wall_time + learn_s : rec.wall_time;
    result.sps.add_window(fresh, window_s);
    result.mean_return_curve.push_back(rolling.mean());
    result.collect_times.push_back(rec.wall_time);
    result.learn_times.push_back(learn_s);
    result.per_env_counts.push_back(rec.per_env_counts);
    result.deficits.push_back(rec.deficit);

    sinks.rollout(rec);
    sinks.update(stats, rolling.mean());
    if (cfg.dump_rollouts) sinks.dump(view, u);
    if (!out_prefix.empty() && cfg.checkpoint_every > 0 &&
        (u + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(out_prefix + "_checkpoint.json", learner);
    }
    if (on_update) {
      UpdateEvent ev;
      ev.update = u;
      ev.steps_consumed = result.steps;
      ev.train = stats;
      ev.timing = rec;
      ev.mean_return = rolling.mean();
      ev.episodes = static_cast<int>(returns.size());
      on_update(ev);
    }
    log_debug("update " + std::to_string(u) + " return " + std::to_string(rolling.mean()));
  }

  result.final_mean_return = rolling.mean();
  if (!out_prefix.empty()) {
    save_checkpoint(out_prefix + "_checkpoint.json", learner);
    json summary;
    summary["updates"] = result.updates;
    summary["steps"] = result.steps;
    summary["mean_sps"] = result.sps.mean_sps();
    summary["max_sps"] = result.sps.max_sps();
    summary["final_mean_return"] = result.final_mean_return;
    std::ofstream(out_prefix + "_summary.json") << summary.dump(2) << "\n";
  }
  return result;
}

TrainResult train_replicas(const RunConfig& cfg, const std::string& out_prefix,
                           const std::function<void(const UpdateEvent&)>& on_update) {
  RuntimeConfig rt = to_runtime_config(cfg);
  ReplicaGroup group(rt, to_ppo_config(cfg), to_entropy_controller(cfg), to_schedule(cfg),
                     to_distributed_config(cfg), rng::mix(cfg.seed, 0x9a9a));

  Sinks sinks(out_prefix);
  TrainResult result;
  RollingReturn rolling;
  std::mutex mu;
  std::vector<long> iter_steps;
  std::vector<double> iter_wall;
  double last_iter_t = now_wall();

  const int iterations = cfg.derived_updates();
  group.train(iterations, [&](const IterationResult& r) {
    std::lock_guard lk(mu);
    rolling.add(r.episode_returns);
    result.steps += r.train.fresh_steps;
    if (static_cast<int>(iter_steps.size()) <= r.iteration) {
      iter_steps.resize(r.iteration + 1, 0);
      iter_wall.resize(r.iteration + 1, 0);
    }
    iter_steps[r.iteration] += r.train.fresh_steps;
    if (r.rank == 0) {
      const double t = now_wall();
      iter_wall[r.iteration] = t - last_iter_t;
      last_iter_t = t;
      result.updates = r.iteration + 1;
      result.mean_return_curve.push_back(rolling.mean());
      result.collect_times.push_back(r.timing.wall_time);
      result.learn_times.push_back(r.timing.learn_time);
      result.per_env_counts.push_back(r.timing.per_env_counts);
      result.deficits.push_back(r.deficit);
      sinks.rollout(r.timing);
      sinks.update(r.train, rolling.mean());
    }
    if (on_update) {
      UpdateEvent ev;
      ev.update = r.iteration;
      ev.rank = r.rank;
      ev.steps_consumed = result.steps;
      ev.train = r.train;
      ev.timing = r.timing;
      ev.mean_return = rolling.mean();
      ev.episodes = static_cast<int>(r.episode_returns.size());
      on_update(ev);
    }
  });

  for (std::size_t i = 0; i < iter_steps.size(); ++i) {
    if (iter_wall[i] > 0) result.sps.add_window(iter_steps[i], iter_wall[i]);
  }
  result.final_mean_return = rolling.mean();
  if (!out_prefix.empty()) {
    save_checkpoint(out_prefix + "_checkpoint.json", group.learner(0));
    json summary;
    summary["updates"] = result.updates;
    summary["steps"] = result.steps;
    summary["mean_sps"] = result.sps.mean_sps();
    summary["max_sps"] = result.sps.max_sps();
    summary["final_mean_return"] = result.final_mean_return;
    summary["param_divergence"] = group.param_divergence();
    std::ofstream(out_prefix + "_summary.json") << summary.dump(2) << "\n";
  }
  return result;
}

}  // namespace

TrainResult run_training(const RunConfig& cfg, const std::string& out_prefix,
                         const std::function<void(const UpdateEvent&)>& on_update) {
  validate_or_throw(cfg);
  if (cfg.replicas > 1) return train_replicas(cfg, out_prefix, on_update);
  return train_single(cfg, out_prefix, on_update);
}

std::vector<BenchRow> run_bench(const RunConfig& base, const std::vector<std::string>& regimes,
                                const std::vector<std::uint64_t>& seeds, std::ostream* csv) {
  std::vector<BenchRow> rows;
  for (const auto& regime : regimes) {
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.regime = regime;
      cfg.seed = seed;
      cfg.updates = base.bench_rollouts + base.bench_warmup;
      if (!base.bench_learn) {
        // collection-only benchmarking: keep the update trivial
        cfg.epochs = 1;
        cfg.lr = 0.0;
      }
      validate_or_throw(cfg);
      log_info("bench: regime=" + regime + " seed=" + std::to_string(seed));

      SpsStats sps;
      long env_min = 1 << 30, env_max = 0, env_sum = 0, env_n = 0;
      const int warmup = base.bench_warmup;
      TrainResult r = run_training(cfg, "", [&](const UpdateEvent& ev) {
        if (ev.rank != 0 || ev.update < warmup) return;
        const double window = cfg.clock == "real"
                                  ? ev.timing.wall_time + ev.timing.learn_time
                                  : ev.timing.wall_time;
        sps.add_window(ev.train.fresh_steps, window);
        for (int c : ev.timing.per_env_counts) {
          env_min = std::min<long>(env_min, c);
          env_max = std::max<long>(env_max, c);
          env_sum += c;
          ++env_n;
        }
      });
      (void)r;

      BenchRow row;
      row.regime = regime;
      row.seed = seed;
      row.replicas = cfg.replicas;
      row.mean_sps = sps.mean_sps();
      row.max_sps = sps.max_sps();
      row.mean_over_max = sps.max_sps() > 0 ? sps.mean_sps() / sps.max_sps() : 0;
      row.env_count_min = static_cast<int>(env_min);
      row.env_count_max = static_cast<int>(env_max);
      row.env_count_mean = env_n > 0 ? static_cast<double>(env_sum) / env_n : 0;
      rows.push_back(row);
    }
  }

  // speedups vs the sync row of the same seed
  for (auto& row : rows) {
    for (const auto& sync : rows) {
      if (sync.regime == "sync" && sync.seed == row.seed && sync.mean_sps > 0) {
        row.speedup_vs_sync = row.mean_sps / sync.mean_sps;
      }
    }
  }

  if (csv) {
    *csv << "regime,seed,replicas,mean_sps,max_sps,mean_over_max,speedup_vs_sync,"
            "env_count_min,env_count_mean,env_count_max\n";
    for (const auto& r : rows) {
      *csv << r.regime << "," << r.seed << "," << r.replicas << "," << r.mean_sps << ","
           << r.max_sps << "," << r.mean_over_max << "," << r.speedup_vs_sync << ","
           << r.env_count_min << "," << r.env_count_mean << "," << r.env_count_max << "\n";
    }
  }
  return rows;
}

void run_compare(const RunConfig& base, const std::vector<std::string>& regimes,
                 const std::vector<std::uint64_t>& seeds, std::ostream& csv) {
  csv << "steps,seed,regime,mean_return\n";
  for (const auto& regime : regimes) {
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.regime = regime;
      cfg.seed = seed;
      validate_or_throw(cfg);
      log_info("compare: regime=" + regime + " seed=" + std::to_string(seed));
      run_training(cfg, "", [&](const UpdateEvent& ev) {
        if (ev.rank != 0) return;
        csv << ev.steps_consumed << "," << seed << "," << regime << "," << ev.mean_return
            << "\n";
      });
    }
  }
}

int run_replay(const RunConfig& cfg, const std::string& trace_path, std::ostream& out) {
  std::ifstream in(trace_path);
  if (!in) {
    out << "replay: cannot open trace " << trace_path << "\n";
    return 2;
  }
  RolloutView view = load_view(in);
  out << "trace: " << view.size() << " steps, " << view.seqs.size() << " sequences, N="
      << view.N << " T=" << view.T << " deficit=" << view.deficit << "\n";
  out << "per-env counts:";
  for (int c : view.per_env_counts) out << " " << c;
  out << "\n";

  const int B = cfg.minibatches;
  auto groups = split_minibatches(view, B, cfg.seed);
  for (std::size_t b = 0; b < groups.size(); ++b) {
    PackedBatch batch = pack(view, groups[b]);
    out << "mini-batch " << b << ": " << batch.total_steps << " steps, "
        << batch.seqs.size() << " sequences, batch_sizes [";
    for (std::size_t t = 0; t < batch.batch_sizes.size(); ++t) {
      if (t) out << " ";
      out << batch.batch_sizes[t];
    }
    out << "]\n";
  }

  ModelConfig mc;
  mc.obs_dim = view.obs_dim;
  mc.encoder_dim = cfg.encoder;
  mc.hidden_dim = view.hidden_dim;
  mc.action_kind = view.action_kind;
  mc.num_actions = to_task_spec(cfg).num_actions();
  mc.act_dim = view.act_dim;
  PolicyParams params = PolicyParams::init(mc, rng::mix(cfg.seed, 0x9a9a));
  Learner learner(params, to_ppo_config(cfg), to_entropy_controller(cfg), to_schedule(cfg),
                  rng::mix(cfg.seed, 0xF00d));
  TrainStats st = learner.update(view);
  out << "replayed update: loss " << st.loss << " value_loss " << st.value_loss
      << " entropy " << st.entropy << " mean_ratio " << st.mean_ratio << " clip_fraction "
      << st.clip_fraction << "\n";
  return 0;
}

void save_checkpoint(const std::string& path, const Learner& learner) {
  json j;
  j["format"] = "ver-checkpoint";
  j["version"] = 1;
  j["update_index"] = learner.update_index();
  j["consumed_steps"] = learner.consumed_steps();
  j["alpha"] = const_cast<Learner&>(learner).entropy().alpha;
  j["params"] = params_to_json(learner.params());
  j["adam"] = adam_to_json(learner.adam());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out << j.dump() << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  json j;
  in >> j;
  if (j.value("format", "") != "ver-checkpoint" || j.value("version", 0) != 1) {
    throw ConfigError("unrecognized checkpoint format: " + path);
  }
  Checkpoint c;
  c.params = params_from_json(j.at("params"));
  c.adam = adam_from_json(j.at("adam"), c.params);
  c.alpha = j.at("alpha");
  c.consumed_steps = j.at("consumed_steps");
  c.update_index = j.at("update_index");
  return c;
}

}  // namespace ver
