#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace vimp {

/// Deterministic splitmix64 RNG. Self-contained so that streams are
/// reproducible across platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double next_double() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) { return lo + (float)next_double() * (hi - lo); }

  /// Uniform integer in [0, n). n must be positive.
  int next_int(int n) { return (int)(next_u64() % (uint64_t)n); }

  /// Standard normal via Box-Muller (second value cached).
  float normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * M_PI * u2;
    cached_ = (float)(r * std::sin(th));
    have_cached_ = true;
    return (float)(r * std::cos(th));
  }

  float normal(float mean, float stddev) { return mean + stddev * normal(); }

  /// Derive an independent stream without disturbing this one.
  Rng fork(uint64_t stream) const {
    uint64_t z = state_ ^ (0xA24BAED4963EE407ULL + stream * 0x9FB21C651E98DF25ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = (int)v.size() - 1; i > 0; --i) {
      int j = next_int(i + 1);
      std::swap(v[i], v[j]);
    }
  }

  /// k distinct indices drawn from [0, n), in draw order.
  std::vector<int> sample_indices(int n, int k) {
    std::vector<int> all(n);
    for (int i = 0; i < n; ++i) all[i] = i;
    shuffle(all);
    all.resize(k);
    return all;
  }

 private:
  uint64_t state_;
  bool have_cached_ = false;
  float cached_ = 0.0f;
};

}  // namespace vimp
