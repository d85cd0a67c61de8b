#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace pmt {

/// splitmix64 step; also the project's stateless hash for derived seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_u64(std::uint64_t x) {
  std::uint64_t s = x;
  return splitmix64(s);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}

/// Uniform in [0,1) from 53 random bits.
inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

/// Deterministic counter-free generator with a single u64 of state, so runs
/// are reproducible and the state serializes into checkpoints verbatim.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  double uniform() { return u64_to_unit(next_u64()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Inclusive bounds.
  int uniform_int(int lo, int hi) {
    if (hi < lo) return lo;
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  /// Box–Muller (cosine branch only; one draw of state per call pair).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

/// Stateless Bernoulli used for schedule draws: outcome depends only on
/// (seed, step, lane), never on how many draws happened before.
inline bool hash_bernoulli(std::uint64_t seed, std::uint64_t step, std::uint64_t lane, double p) {
  std::uint64_t h = hash_combine(hash_combine(seed, step), lane);
  return u64_to_unit(h) < p;
}

}  // namespace pmt
