#pragma once

#include <cmath>
#include <cstdint>

namespace gnflow {

/// Counter-based splittable RNG. Output i is a pure function of (key, i), so
/// streams can be split without sharing state and every draw is reproducible
/// across platforms. Mixing is the SplitMix64 finalizer.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(mix(seed + kGolden) ^ mix(stream + kGolden2))) {}

  /// Independent child stream; deterministic in (parent key, id).
  Rng split(std::uint64_t id) const {
    Rng r(0);
    r.key_ = mix(key_ ^ mix(id + kGolden2));
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no libc distribution, keeps draws
  /// bit-reproducible everywhere).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * kPi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  static constexpr std::uint64_t kGolden2 = 0xbf58476d1ce4e5b9ULL;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace gnflow
