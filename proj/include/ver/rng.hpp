#pragma once

#include "ver/types.hpp"

#include <cmath>
#include <cstdint>

namespace ver {

// Counter-based RNG. Every draw is a pure function of (key..., counter), so
// results never depend on which thread draws first or how draws interleave.
// The mixer is splitmix64 applied to a combined key; statistical quality is
// plenty for simulation noise and latency sampling.
namespace rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2) + splitmix64(b)));
}

}  // namespace rng

/// A stateless stream keyed by (seed, stream ids...); draws are indexed by an
/// internal counter so a copied stream replays identically.
class CounterRng {
 public:
  CounterRng() : key_(0) {}
  explicit CounterRng(std::uint64_t seed) : key_(rng::splitmix64(seed)) {}

  /// Derives an independent substream; does not advance this stream.
  CounterRng stream(std::uint64_t id) const {
    CounterRng r;
    r.key_ = rng::mix(key_, id);
    return r;
  }
  CounterRng stream(std::uint64_t a, std::uint64_t b) const { return stream(a).stream(b); }
  CounterRng stream(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
    return stream(a).stream(b).stream(c);
  }

  std::uint64_t next_u64() { return rng::mix(key_, counter_++); }

  /// Uniform in [0, 1).
  Scalar uniform() {
    return static_cast<Scalar>(next_u64() >> 11) * 0x1.0p-53;
  }

  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller.
  Scalar normal() {
    Scalar u1 = uniform();
    Scalar u2 = uniform();
    if (u1 <= 0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// exp(sigma * z), z ~ N(0,1). Strictly positive.
  Scalar lognormal(Scalar sigma) { return std::exp(sigma * normal()); }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace ver
