#include "ver/distributed.hpp"

#include "ver/metrics.hpp"
#include "ver/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

namespace ver {

namespace {

long count_yields(const PreemptionEstimator& m, Scalar t) {
  long c = 0;
  for (Scalar tau : m.step_times) c += static_cast<long>(std::floor(t / tau));
  return c;
}

}  // namespace

Scalar estimate_time(const PreemptionEstimator& m, long steps) {
  if (steps < 0 || steps > m.max_steps) {
    throw ProtocolError("estimate_time: S out of range [0, S_max]");
  }
  if (steps == 0) return 0.0;
  if (m.step_times.empty()) throw ProtocolError("estimate_time: no step-time estimates");
  for (Scalar tau : m.step_times) {
    if (!(tau > 0)) throw ProtocolError("estimate_time: non-positive step time");
  }
  Scalar tau_min = *std::min_element(m.step_times.begin(), m.step_times.end());
  Scalar lo = 0.0;
  Scalar hi = tau_min * static_cast<Scalar>(steps);  // count(hi) >= S
  while (count_yields(m, hi) < steps) hi *= 2;       // guard against fp rounding
  // bisect to adjacent doubles, then snap to the exact member

  for (int it = 0; it < 200; ++it) {
    const Scalar mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (count_yields(m, mid) >= steps) hi = mid;
    else lo = mid;
  }
  Scalar best = hi;
  for (Scalar tau : m.step_times) {
    const Scalar c = std::floor(hi / tau) * tau;
    if (c > lo && c < best) best = c;
  }
  return best;
}

long optimal_preempt_steps(const PreemptionEstimator& m) {
  if (!(m.learn_time > 0)) throw ProtocolError("optimal_preempt_steps: LT must be positive");
  long best_s = 1;
  Scalar best_rate = -1;
  for (long s = 1; s <= m.max_steps; ++s) {
    const Scalar rate = static_cast<Scalar>(s) / (estimate_time(m, s) + m.learn_time);
    if (rate > best_rate) {
      best_rate = rate;
      best_s = s;
    }
  }
  return best_s;
}

PreemptMode preempt_from_string(const std::string& name) {
  if (name == "none") return PreemptMode::None;
  if (name == "optimal") return PreemptMode::Optimal;
  if (name == "fixed_fraction") return PreemptMode::FixedFraction;
  throw ConfigError("unknown preempt mode: " + name);
}

std::string to_string(PreemptMode m) {
  switch (m) {
    case PreemptMode::None: return "none";
    case PreemptMode::Optimal: return "optimal";
    case PreemptMode::FixedFraction: return "fixed_fraction";
  }
  return "?";
}

AllReduce::AllReduce(int replicas)
    : n_(replicas), slots_(replicas, nullptr), scalar_slots_(replicas, 0), barrier_(replicas) {}

void AllReduce::average(int rank, std::vector<Matrix>& grads) {
  if (n_ == 1) return;
  slots_[rank] = &grads;
  barrier_.arrive_and_wait();
  if (rank == 0) {
    result_.resize(grads.size());
    for (std::size_t t = 0; t < grads.size(); ++t) {
      Matrix acc = (*slots_[0])[t];
      for (int r = 1; r < n_; ++r) acc += (*slots_[r])[t];
      result_[t] = acc / static_cast<Scalar>(n_);
    }
  }
  barrier_.arrive_and_wait();
  grads = result_;
  barrier_.arrive_and_wait();
}

Scalar AllReduce::average_scalar(int rank, Scalar value) {
  if (n_ == 1) return value;
  scalar_slots_[rank] = value;
  barrier_.arrive_and_wait();
  if (rank == 0) {
    Scalar acc = 0;
    for (int r = 0; r < n_; ++r) acc += scalar_slots_[r];
    scalar_result_ = acc / static_cast<Scalar>(n_);
  }
  barrier_.arrive_and_wait();
  const Scalar out = scalar_result_;
  barrier_.arrive_and_wait();
  return out;
}

ReplicaGroup::ReplicaGroup(const RuntimeConfig& runtime, const PPOConfig& ppo,
                           const EntropyController& entropy, const CosineSchedule& schedule,
                           const DistributedConfig& dist, std::uint64_t param_seed)
    : runtime_(runtime),
      ppo_(ppo),
      dist_(dist),
      allreduce_(dist.replicas),
      coordinator_(dist.replicas) {
  const int R = dist_.replicas;
  PolicyParams init = PolicyParams::init(runtime_.model, param_seed);
  prev_views_.resize(R);
  versions_.assign(R, 0);
  learn_times_.assign(R, 0.0);
  tau_estimates_.resize(R);
  fresh_counts_.assign(R, 0);
  phase_barrier_ = std::make_unique<SyncBarrier>(R);

  for (int r = 0; r < R; ++r) {
    RuntimeConfig rc = runtime_;
    rc.seed = rng::mix(runtime_.seed, static_cast<std::uint64_t>(r));
    if (static_cast<std::size_t>(r) < dist_.replica_latency_scales.size()) {
      rc.task.latency.base *= dist_.replica_latency_scales[r];
    }
    auto snap = std::make_shared<PolicySnapshot>();
    snap->params = init;
    snap->version = 0;

    drivers_.push_back(std::make_unique<ThreadedDriver>(rc, snap));
    learners_.push_back(std::make_unique<Learner>(init, ppo_, entropy, schedule,
                                                  rng::mix(runtime_.seed, 0xF00d)));
    coordinator_.attach(r, drivers_[r].get());
  }
  for (int r = 0; r < R; ++r) {
    const int rank = r;
    learners_[r]->grad_hook = [this, rank](std::vector<Matrix>& g) {
      allreduce_.average(rank, g);
    };
    learners_[r]->entropy_hook = [this, rank](Scalar h) {
      return allreduce_.average_scalar(rank, h);
    };
    if (dist_.preempt == PreemptMode::Optimal) {
      if (dist_.per_replica_budget) {
        drivers_[r]->on_commits = [this, rank](int n) {
          const long c = own_counts_[rank].fetch_add(n) + n;
          const long thr = per_replica_threshold_.load();
          if (thr > 0 && c >= thr) drivers_[rank]->request_force_close();
        };
      } else {
        drivers_[r]->on_commits = [this](int n) { coordinator_.add_steps(n); };
      }
    }
  }
  own_counts_ = std::make_unique<std::atomic<long>[]>(R);
  for (int r = 0; r < R; ++r) own_counts_[r].store(0);
  coordinator_.start_iteration(0);  // first iteration: no preemption
}

void ReplicaGroup::abort_all(const std::string& why) {
  {
    std::lock_guard lk(abort_mu_);
    if (abort_reason_.empty()) abort_reason_ = why;
  }
  abort_.store(true);
  allreduce_.abort();
  phase_barrier_->abort();
}

void ReplicaGroup::replica_main(int rank, int iterations, const Callback& cb) {
  ThreadedDriver& driver = *drivers_[rank];
  Learner& learner = *learners_[rank];
  const int R = dist_.replicas;
  ReturnTracker tracker(runtime_.N);

  try {
    for (int iter = 0; iter < iterations; ++iter) {
      phase_barrier_->arrive_and_wait();  // threshold for this iteration published

      IterationResult result;
      result.iteration = iter;
      result.rank = rank;
      result.preempt_threshold = next_threshold_;

      auto snap = std::make_shared<PolicySnapshot>();
      snap->params = learner.params();
      snap->version = ++versions_[rank];
      driver.request_begin(snap);
      auto [view, rec] = driver.wait_rollout();
      result.timing = rec;
      result.deficit = view.deficit;

      tau_estimates_[rank].assign(runtime_.N, 0);
      for (int e = 0; e < runtime_.N; ++e) {
        tau_estimates_[rank][e] = rec.wall_time / std::max(1, view.per_env_counts[e]);
      }
      fresh_counts_[rank] = view.size();

      if (dist_.preempt == PreemptMode::FixedFraction && view.deficit == 0) {
        const int needed = static_cast<int>(std::ceil(dist_.preempt_fraction * R));
        if (finished_natural_.fetch_add(1) + 1 >= needed) {
          for (auto& d : drivers_) d->request_force_close();
        }
      }

      phase_barrier_->arrive_and_wait();  // all replicas closed
      if (rank == 0) {
        global_pre_ = global_consumed_;
        for (int r = 0; r < R; ++r) global_consumed_ += fresh_counts_[r];
        finished_natural_.store(0);
      }
      phase_barrier_->arrive_and_wait();  // consumed totals published

      learner.set_consumed_steps(global_pre_);
      if (view.deficit > 0 && prev_views_[rank].size() > 0) {
        backfill_stale(view, prev_views_[rank], view.deficit);
      }
      const auto t0 = std::chrono::steady_clock::now();
      result.train = learner.update(view);
      learn_times_[rank] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.timing.learn_time = learn_times_[rank];
      result.stale_steps = view.stale_steps;
      result.episode_returns = tracker.feed(view);

      prev_views_[rank] = std::move(view);
      if (cb) cb(result);

      phase_barrier_->arrive_and_wait();  // all learned; pool stats for the next threshold
      if (rank == 0) {
        long threshold = 0;
        if (dist_.preempt == PreemptMode::Optimal && iter + 1 < iterations) {
          PreemptionEstimator est;
          est.learn_time =
              std::accumulate(learn_times_.begin(), learn_times_.end(), 0.0) / R;
          est.max_steps = static_cast<long>(runtime_.T) * runtime_.N * R;
          for (int r = 0; r < R; ++r) {
            est.step_times.insert(est.step_times.end(), tau_estimates_[r].begin(),
                                  tau_estimates_[r].end());
          }
          threshold = est.learn_time > 0 ? optimal_preempt_steps(est) : 0;
        }
        next_threshold_ = threshold;
        // ablation: each replica preempts on its own share of the budget
        per_replica_threshold_.store(
            dist_.per_replica_budget && threshold > 0 ? threshold / R : 0);
        for (int r = 0; r < R; ++r) own_counts_[r].store(0);
        coordinator_.start_iteration(dist_.per_replica_budget ? 0 : threshold);
      }
    }
  } catch (const std::exception& e) {
    abort_all(e.what());
  }
}

void ReplicaGroup::train(int iterations, const Callback& cb) {
  std::vector<std::thread> threads;
  for (int r = 0; r < dist_.replicas; ++r) {
    threads.emplace_back([this, r, iterations, &cb] { replica_main(r, iterations, cb); });
  }
  for (auto& t : threads) t.join();
  if (abort_.load()) {
    throw ProtocolError("replica group aborted: " + abort_reason_);
  }
}

Scalar ReplicaGroup::param_divergence() const {
  Scalar worst = 0;
  auto base = learners_[0]->params().tensors();
  for (std::size_t r = 1; r < learners_.size(); ++r) {
    auto other = learners_[r]->params().tensors();
    for (std::size_t t = 0; t < base.size(); ++t) {
      worst = std::max(worst,
                       (*base[t].second - *other[t].second).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

Scalar ReplicaGroup::alpha_divergence() const {
  Scalar worst = 0;
  const Scalar a0 = learners_[0]->entropy().alpha;
  for (std::size_t r = 1; r < learners_.size(); ++r) {
    worst = std::max(worst, std::abs(learners_[r]->entropy().alpha - a0));
  }
  return worst;
}

}  // namespace ver
