#include "ver/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace ver {

Regime regime_from_string(const std::string& name) {
  if (name == "sync") return Regime::Sync;
  if (name == "nover") return Regime::NoVer;
  if (name == "ver") return Regime::Ver;
  throw ConfigError("unknown regime: " + name);
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::Sync: return "sync";
    case Regime::NoVer: return "nover";
    case Regime::Ver: return "ver";
  }
  return "?";
}

InferenceRequest initial_request(Env& env, std::uint64_t seed) {
  InferenceRequest req;
  req.env_index = env.env_index();
  req.observation = env.reset(seed);
  req.first = true;
  req.obs_episode = 0;
  req.obs_step = 0;
  return req;
}

InferenceRequest apply_action(Env& env, const Action& action) {
  InferenceRequest req;
  req.env_index = env.env_index();
  req.episode_index = env.episode_index();
  req.step_in_episode = env.step_in_episode();
  StepResult r = env.step(action);
  req.reward = r.reward;
  req.done = r.done;
  req.latency = r.latency_spent;
  if (r.done) {
    req.observation = env.reset_episode();
    req.obs_episode = env.episode_index();
    req.obs_step = 0;
  } else {
    req.observation = r.observation;
    req.obs_episode = req.episode_index;
    req.obs_step = req.step_in_episode + 1;
  }
  return req;
}

// ---------------------------------------------------------------------------
// InferenceEngine

namespace {

RolloutBuffer::Config buffer_config(const RuntimeConfig& cfg) {
  RolloutBuffer::Config bc;
  bc.T = cfg.T;
  bc.N = cfg.N;
  bc.mode = cfg.rollout_mode();
  bc.action_kind = cfg.task.action_kind();
  bc.obs_dim = cfg.task.obs_dim();
  bc.act_dim = cfg.task.action_dim();
  bc.hidden_dim = cfg.model.hidden_dim;
  return bc;
}

}  // namespace

InferenceEngine::InferenceEngine(const RuntimeConfig& cfg, SnapshotPtr snapshot)
    : cfg_(cfg), snapshot_(std::move(snapshot)), buffer_(buffer_config(cfg)) {
  envs_.resize(cfg_.N);
  for (auto& es : envs_) es.h = RowVector::Zero(cfg_.model.hidden_dim);
}

void InferenceEngine::set_snapshot(SnapshotPtr snapshot) { snapshot_ = std::move(snapshot); }

int InferenceEngine::active_envs() const {
  int n = 0;
  for (const auto& es : envs_) n += es.parked ? 0 : 1;
  return n;
}

InferenceEngine::BatchResult InferenceEngine::begin_rollout() {
  BatchResult out;
  buffer_.begin_rollout(snapshot_->version);
  out.new_commits = buffer_.committed();  // consumed carryover
  for (auto& es : envs_) es.paused = false;

  std::vector<InferenceRequest> parked;
  for (auto& es : envs_) {
    if (es.parked) {
      parked.push_back(std::move(*es.parked));
      es.parked.reset();
    }
  }
  std::vector<const InferenceRequest*> needs;
  for (auto& req : parked) {
    if (buffer_.open() && !buffer_.env_at_cap(req.env_index)) {
      needs.push_back(&req);
    } else {
      envs_[req.env_index].parked = req;
    }
  }
  compute_actions(needs, out);
  if (!buffer_.open()) out.closed_now = true;
  return out;
}

void InferenceEngine::complete_pending(const InferenceRequest& req, BatchResult& out) {
  EnvSlot& es = envs_[req.env_index];
  if (!es.pending) {
    throw ProtocolError("inference: completion for env " + std::to_string(req.env_index) +
                        " without an outstanding action");
  }
  EnvStepRecord rec;
  rec.env_index = req.env_index;
  rec.episode_index = es.pending->episode;
  rec.step_in_episode = es.pending->t;
  rec.obs = std::move(es.pending->obs);
  rec.action = std::move(es.pending->action);
  rec.log_prob = es.pending->log_prob;
  rec.value = es.pending->value;
  rec.h_before = std::move(es.pending->h_before);
  rec.snapshot_version = es.pending->version;
  rec.reward = req.reward;
  rec.done = req.done;
  rec.latency = req.latency;
  es.pending.reset();

  if (buffer_.append_step(rec) == AppendOutcome::Accepted) {
    ++out.new_commits;
    if (!buffer_.open()) out.closed_now = true;
  } else {
    // Variable mode stored it in carryover; Fixed mode after a preempted
    // close drops it (stragglers are cut off, the trajectory resumes from the
    // parked observation). Either way this record's value estimate is the
    // bootstrap for the env's last committed step of the closing rollout.
    if (rec.step_in_episode > 0) buffer_.set_bootstrap(rec.env_index, rec.value);
  }
}

void InferenceEngine::compute_actions(const std::vector<const InferenceRequest*>& needs,
                                      BatchResult& out) {
  if (needs.empty()) return;
  const int m = static_cast<int>(needs.size());
  const int H = cfg_.model.hidden_dim;
  Matrix obs(m, cfg_.task.obs_dim());
  Matrix h(m, H);
  for (int i = 0; i < m; ++i) {
    obs.row(i) = needs[i]->observation.transpose();
    h.row(i) = envs_[needs[i]->env_index].h;
  }
  const PolicyParams& params = snapshot_->params;
  ActResult ar = act(params, obs, h);

  for (int i = 0; i < m; ++i) {
    const InferenceRequest& req = *needs[i];
    EnvSlot& es = envs_[req.env_index];
    CounterRng rng = CounterRng(cfg_.seed)
                         .stream(0xAC7101, static_cast<std::uint64_t>(req.env_index))
                         .stream(static_cast<std::uint64_t>(req.obs_episode),
                                 static_cast<std::uint64_t>(req.obs_step));
    PendingStep p;
    if (cfg_.task.action_kind() == ActionKind::Discrete) {
      const int idx = sample_categorical(ar.dist.row(i), rng);
      p.action = Action::discrete(idx);
      p.log_prob = categorical_log_prob(ar.dist.row(i), idx);
    } else {
      Vector a = sample_gaussian(ar.dist.row(i), params.log_std, rng);
      p.log_prob = gaussian_log_prob(ar.dist.row(i), params.log_std, a);
      p.action = Action::continuous(std::move(a));
    }
    p.obs = req.observation;
    p.value = ar.value[i];
    p.h_before = es.h.transpose();
    p.episode = req.obs_episode;
    p.t = req.obs_step;
    p.version = snapshot_->version;
    out.dispatches.push_back({req.env_index, p.action});
    es.pending = std::move(p);
    es.h = ar.h_new.row(i);
  }
}

InferenceEngine::BatchResult InferenceEngine::process_batch(
    const std::vector<InferenceRequest>& reqs, double) {
  BatchResult out;
  std::vector<const InferenceRequest*> needs;
  for (const auto& req : reqs) {
    EnvSlot& es = envs_[req.env_index];
    if (es.parked) {
      throw ProtocolError("inference: request for env " + std::to_string(req.env_index) +
                          " which is already parked");
    }
    if (!req.first) complete_pending(req, out);
    if (req.done) es.h.setZero();

    const bool capped = cfg_.rollout_mode() == RolloutMode::Fixed &&
                        buffer_.env_at_cap(req.env_index);
    if (buffer_.open() && !capped) {
      needs.push_back(&req);
    } else {
      es.parked = req;
      if (capped) es.paused = true;
    }
  }
  compute_actions(needs, out);
  return out;
}

void InferenceEngine::finalize_bootstraps() {
  for (int e = 0; e < cfg_.N; ++e) {
    EnvSlot& es = envs_[e];
    if (buffer_.bootstrap_set(e)) continue;  // recorded when a completion went to carryover
    if (es.pending) {
      if (es.pending->t > 0) buffer_.set_bootstrap(e, es.pending->value);
    } else if (es.parked && es.parked->obs_step > 0) {
      Vector v = value_only(snapshot_->params, es.parked->observation.transpose(), es.h);
      buffer_.set_bootstrap(e, v[0]);
    }
  }
}

RolloutView InferenceEngine::close(double collect_wall_time) {
  buffer_.set_collect_wall_time(collect_wall_time);
  return buffer_.close_rollout();
}

// ---------------------------------------------------------------------------
// VirtualDriver

namespace {
constexpr int kEvStepComplete = 0;
constexpr int kEvInferDone = 1;
constexpr int kEvBatchTimeout = 2;
}  // namespace

VirtualDriver::VirtualDriver(const RuntimeConfig& cfg, SnapshotPtr snapshot)
    : cfg_(cfg), engine_(cfg, std::move(snapshot)) {
  const int epw = std::max(1, cfg_.envs_per_worker);
  const int workers = (cfg_.N + epw - 1) / epw;
  owner_.resize(cfg_.N);
  for (int e = 0; e < cfg_.N; ++e) {
    owner_[e] = e / epw;
    envs_.emplace_back(cfg_.task, e);
  }
  worker_running_.assign(workers, 0);
  worker_queue_.resize(workers);
  inflight_.resize(cfg_.N);
  idle_.assign(cfg_.N, 0.0);
}

void VirtualDriver::schedule(double t, int kind, int index) {
  events_.push(Event{t, seq_++, kind, index});
}

int VirtualDriver::effective_min() const {
  const int active = engine_.active_envs();
  int want = cfg_.regime == Regime::Sync ? cfg_.N
                                         : std::max(1, cfg_.batching.min_requests);
  return std::max(1, std::min(want, active));
}

void VirtualDriver::submit_request(InferenceRequest req) {
  req.arrival_time = now_;
  if (engine_.rollout_done()) {
    // rollout already closed; the transition rides to the next rollout
    engine_.process_batch({std::move(req)}, now_);
    return;
  }
  pending_.push_back(std::move(req));
  // defer the batching decision behind every event sharing this timestamp so
  // simultaneous arrivals are batched together
  schedule(now_, kEvBatchTimeout, 0);
}

void VirtualDriver::maybe_start_batch() {
  if (infer_busy_ || pending_.empty() || engine_.rollout_done()) return;
  const int eff_min = effective_min();
  const bool timeout_ok = cfg_.regime != Regime::Sync &&
                          now_ - pending_.front().arrival_time >= cfg_.batching.max_wait;
  if (static_cast<int>(pending_.size()) < eff_min && !timeout_ok) {
    if (cfg_.regime != Regime::Sync) {
      schedule(pending_.front().arrival_time + cfg_.batching.max_wait, kEvBatchTimeout, 0);
    }
    return;
  }
  int max_take = cfg_.batching.max_requests > 0 ? cfg_.batching.max_requests : cfg_.N;
  if (cfg_.regime == Regime::Sync) max_take = cfg_.N;
  const int take = std::min<int>(static_cast<int>(pending_.size()), max_take);
  infer_batch_.assign(pending_.begin(), pending_.begin() + take);
  pending_.erase(pending_.begin(), pending_.begin() + take);
  for (const auto& r : infer_batch_) idle_[r.env_index] += now_ - r.arrival_time;
  batch_sizes_.push_back(take);
  infer_busy_ = true;
  schedule(now_ + cfg_.inference_base + cfg_.inference_per_item * take, kEvInferDone, 0);
}

void VirtualDriver::start_next_job(int worker) {
  if (worker_running_[worker] || worker_queue_[worker].empty()) return;
  auto [env, action] = worker_queue_[worker].front();
  worker_queue_[worker].pop_front();
  InferenceRequest req = apply_action(envs_[env], action);
  const double done_at = now_ + std::max(0.0, req.latency);
  inflight_[env] = std::move(req);
  worker_running_[worker] = 1;
  schedule(done_at, kEvStepComplete, env);
}

void VirtualDriver::dispatch(const std::vector<InferenceEngine::Dispatch>& ds) {
  for (const auto& d : ds) {
    const int w = owner_[d.env_index];
    worker_queue_[w].emplace_back(d.env_index, d.action);
    start_next_job(w);
  }
}

std::pair<RolloutView, TimingRecord> VirtualDriver::run_rollout() {
  if (!started_) {
    started_ = true;
    engine_.begin_rollout();
    for (int e = 0; e < cfg_.N; ++e) {
      submit_request(initial_request(envs_[e], cfg_.seed));
    }
  } else {
    auto br = engine_.begin_rollout();
    dispatch(br.dispatches);
    // parked requests may have satisfied the batch condition already
    maybe_start_batch();
  }
  const double collect_start = now_;
  const int carryover_in = engine_.committed();

  while (!engine_.rollout_done()) {
    if (events_.empty()) {
      throw ProtocolError("virtual driver: no events while rollout open (deadlock)");
    }
    Event ev = events_.top();
    events_.pop();
    now_ = std::max(now_, ev.time);
    switch (ev.kind) {
      case kEvStepComplete: {
        const int env = ev.index;
        const int w = owner_[env];
        InferenceRequest req = std::move(*inflight_[env]);
        inflight_[env].reset();
        worker_running_[w] = 0;
        start_next_job(w);
        submit_request(std::move(req));
        break;
      }
      case kEvInferDone: {
        auto result = engine_.process_batch(infer_batch_, now_);
        infer_batch_.clear();
        infer_busy_ = false;
        dispatch(result.dispatches);
        if (engine_.rollout_done()) {
          // park everything that arrived before the close but was not batched
          for (auto& r : pending_) engine_.process_batch({std::move(r)}, now_);
          pending_.clear();
        } else {
          maybe_start_batch();
        }
        break;
      }
      case kEvBatchTimeout:
        maybe_start_batch();
        break;
    }
  }

  engine_.finalize_bootstraps();
  RolloutView view = engine_.close(now_ - collect_start);

  TimingRecord rec;
  rec.rollout_index = rollout_index_++;
  rec.regime = to_string(cfg_.regime);
  rec.wall_time = now_ - collect_start;
  rec.steps = view.size();
  rec.carryover_in = carryover_in;
  rec.deficit = view.deficit;
  rec.per_env_counts = view.per_env_counts;
  rec.idle_times = idle_;
  rec.batch_sizes = std::move(batch_sizes_);
  batch_sizes_.clear();
  rec.snapshot_version = view.snapshot_version;
  rec.collect_start = collect_start;
  rec.collect_end = now_;
  std::fill(idle_.begin(), idle_.end(), 0.0);
  return {std::move(view), rec};
}

// ---------------------------------------------------------------------------
// ThreadedDriver

ThreadedDriver::ThreadedDriver(const RuntimeConfig& cfg, SnapshotPtr snapshot)
    : cfg_(cfg), engine_(cfg, std::move(snapshot)), t0_(std::chrono::steady_clock::now()) {
  const int epw = std::max(1, cfg_.envs_per_worker);
  const int workers = (cfg_.N + epw - 1) / epw;
  worker_envs_.resize(workers);
  mailbox_.resize(cfg_.N);
  idle_.assign(cfg_.N, 0.0);
  for (int e = 0; e < cfg_.N; ++e) {
    envs_.emplace_back(cfg_.task, e);
    worker_envs_[e / epw].push_back(e);
  }
  for (int w = 0; w < workers; ++w) {
    env_threads_.emplace_back([this, w] { env_worker_main(w); });
  }
  const int iw = std::max(1, cfg_.inference_workers);
  for (int w = 0; w < iw; ++w) {
    infer_threads_.emplace_back([this, w] { inference_main(w); });
  }
}

ThreadedDriver::~ThreadedDriver() {
  shutdown_.store(true);
  {
    std::lock_guard lk(mail_mu_);
  }
  mail_cv_.notify_all();
  {
    std::lock_guard lk(queue_mu_);
  }
  queue_cv_.notify_all();
  gate_cv_.notify_all();
  for (auto& t : env_threads_) t.join();
  for (auto& t : infer_threads_) t.join();
}

double now_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void ThreadedDriver::request_begin(SnapshotPtr snapshot) {
  {
    std::lock_guard lk(gate_mu_);
    if (phase_ != Phase::Idle) {
      throw ProtocolError("request_begin: previous rollout still in flight");
    }
    next_snapshot_ = std::move(snapshot);
    phase_ = Phase::BeginRequested;
    phase_hint_.store(1);
    force_close_.store(false);
  }
  queue_cv_.notify_all();
}

void ThreadedDriver::request_force_close() {
  force_close_.store(true);
  queue_cv_.notify_all();
}

void ThreadedDriver::deliver(const std::vector<InferenceEngine::Dispatch>& ds) {
  if (ds.empty()) return;
  {
    std::lock_guard lk(mail_mu_);
    for (const auto& d : ds) mailbox_[d.env_index].action = d.action;
  }
  mail_cv_.notify_all();
}

void ThreadedDriver::env_worker_main(int worker) {
  const auto& owned = worker_envs_[worker];
  std::size_t rr = 0;  // round-robin cursor over owned envs
  while (true) {
    int env = -1;
    Action action;
    {
      std::unique_lock lk(mail_mu_);
      mail_cv_.wait(lk, [&] {
        if (shutdown_.load()) return true;
        for (int e : owned) {
          if (mailbox_[e].action) return true;
        }
        return false;
      });
      if (shutdown_.load()) return;
      for (std::size_t k = 0; k < owned.size(); ++k) {
        const int e = owned[(rr + k) % owned.size()];
        if (mailbox_[e].action) {
          env = e;
          action = std::move(*mailbox_[e].action);
          mailbox_[e].action.reset();
          rr = (rr + k + 1) % owned.size();
          break;
        }
      }
    }
    if (env < 0) continue;

    InferenceRequest req = apply_action(envs_[env], action);
    if (cfg_.task.latency.enabled && req.latency > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(req.latency));
    }
    req.arrival_time = now_seconds(t0_);
    {
      std::lock_guard lk(queue_mu_);
      queue_.push_back(std::move(req));
    }
    queue_cv_.notify_all();
  }
}

void ThreadedDriver::inference_main(int worker) {
  while (!shutdown_.load()) {
    // handle begin requests (worker 0 only)
    if (worker == 0 && phase_hint_.load() == 1) {
      std::unique_lock gl(gate_mu_);
      if (phase_ == Phase::BeginRequested) {
        engine_.set_snapshot(next_snapshot_);
        next_snapshot_.reset();
        InferenceEngine::BatchResult br;
        if (rollout_index_ == 0) {
          engine_.begin_rollout();
          std::lock_guard ql(queue_mu_);
          for (int e = 0; e < cfg_.N; ++e) {
            InferenceRequest req = initial_request(envs_[e], cfg_.seed);
            req.arrival_time = now_seconds(t0_);
            queue_.push_back(std::move(req));
          }
        } else {
          br = engine_.begin_rollout();
        }
        total_commits_.fetch_add(br.new_commits);
        active_hint_.store(engine_.active_envs());
        collect_start_ = now_seconds(t0_);
        phase_ = Phase::Collecting;
        phase_hint_.store(2);
        gl.unlock();
        deliver(br.dispatches);
        queue_cv_.notify_all();
        continue;
      }
    }

    // gather a batch (phase read through the lock-free hint; the engine
    // re-checks the authoritative phase under the gate)
    std::vector<InferenceRequest> batch;
    {
      std::unique_lock ql(queue_mu_);
      queue_cv_.wait_for(ql, std::chrono::milliseconds(2), [&] {
        return shutdown_.load() || !queue_.empty() || force_close_.load();
      });
      if (shutdown_.load()) return;
      const bool collecting = phase_hint_.load() == 2;
      if (!queue_.empty()) {
        int eff_min = 1;
        int max_take = cfg_.batching.max_requests > 0 ? cfg_.batching.max_requests : cfg_.N;
        if (collecting) {
          if (cfg_.regime == Regime::Sync) {
            eff_min = cfg_.N;
            max_take = cfg_.N;
          } else {
            eff_min = std::max(1, cfg_.batching.min_requests);
          }
          eff_min = std::min(eff_min, active_hint_.load());
          eff_min = std::max(eff_min, 1);
        }
        const double age = now_seconds(t0_) - queue_.front().arrival_time;
        const bool timeout_ok = collecting && cfg_.regime != Regime::Sync &&
                                age >= cfg_.batching.max_wait;
        if (static_cast<int>(queue_.size()) >= eff_min || timeout_ok || !collecting) {
          const int take = std::min<int>(static_cast<int>(queue_.size()), max_take);
          batch.assign(std::make_move_iterator(queue_.begin()),
                       std::make_move_iterator(queue_.begin() + take));
          queue_.erase(queue_.begin(), queue_.begin() + take);
        }
      }
    }

    std::lock_guard gl(gate_mu_);
    if (phase_ == Phase::BeginRequested && batch.empty()) continue;
    bool was_collecting = phase_ == Phase::Collecting;

    if (!batch.empty()) {
      const double tnow = now_seconds(t0_);
      if (was_collecting) {
        for (const auto& r : batch) idle_[r.env_index] += std::max(0.0, tnow - r.arrival_time);
      }
      if (was_collecting) batch_sizes_.push_back(static_cast<int>(batch.size()));
      auto result = engine_.process_batch(batch, tnow);
      total_commits_.fetch_add(result.new_commits);
      active_hint_.store(engine_.active_envs());
      if (on_commits && result.new_commits > 0) on_commits(result.new_commits);
      deliver(result.dispatches);
    }

    if (was_collecting && force_close_.load() && !engine_.rollout_done() &&
        engine_.committed() > 0) {
      engine_.force_close();
    }

    if (was_collecting && engine_.rollout_done()) {
      // drain whatever already arrived; those transitions ride to the next rollout
      std::deque<InferenceRequest> rest;
      {
        std::lock_guard ql(queue_mu_);
        rest.swap(queue_);
      }
      const double tnow = now_seconds(t0_);
      for (auto& r : rest) engine_.process_batch({std::move(r)}, tnow);

      engine_.finalize_bootstraps();
      const double tend = now_seconds(t0_);
      RolloutView view = engine_.close(tend - collect_start_);

      TimingRecord rec;
      rec.rollout_index = rollout_index_++;
      rec.regime = to_string(cfg_.regime);
      rec.wall_time = tend - collect_start_;
      rec.steps = view.size();
      rec.deficit = view.deficit;
      rec.per_env_counts = view.per_env_counts;
      rec.idle_times = idle_;
      rec.batch_sizes = std::move(batch_sizes_);
      batch_sizes_.clear();
      rec.snapshot_version = view.snapshot_version;
      rec.collect_start = collect_start_;
      rec.collect_end = tend;
      std::fill(idle_.begin(), idle_.end(), 0.0);

      finished_ = std::make_pair(std::move(view), std::move(rec));
      phase_ = Phase::Closed;
      phase_hint_.store(3);
      gate_cv_.notify_all();
    }
  }
}

std::pair<RolloutView, TimingRecord> ThreadedDriver::wait_rollout() {
  std::unique_lock gl(gate_mu_);
  long last_commits = total_commits_.load();
  double stalled = 0;
  while (!finished_) {
    if (gate_cv_.wait_for(gl, std::chrono::milliseconds(200),
                          [&] { return finished_.has_value(); })) {
      break;
    }
    const long c = total_commits_.load();
    if (c != last_commits) {
      last_commits = c;
      stalled = 0;
    } else {
      stalled += 0.2;
      if (stalled > cfg_.watchdog_timeout) {
        std::size_t qsize;
        {
          std::lock_guard ql(queue_mu_);
          qsize = queue_.size();
        }
        std::ostringstream oss;
        oss << "watchdog: no progress for " << stalled << "s; committed="
            << engine_.committed() << "/" << engine_.capacity()
            << " active=" << engine_.active_envs() << " queue=" << qsize;
        throw ProtocolError(oss.str());
      }
    }
  }
  auto out = std::move(*finished_);
  finished_.reset();
  phase_ = Phase::Idle;
  phase_hint_.store(0);
  return out;
}

}  // namespace ver
