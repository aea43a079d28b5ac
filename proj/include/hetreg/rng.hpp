#pragma once

#include <cstdint>
#include <random>

namespace hetreg {

// Platform-stable draws: std::mt19937_64 is fully specified by the standard,
// the distributions below are implemented here because the standard library's
// distributions are not.
class Rng
{
public:
  explicit Rng(std::uint64_t seed = 0)
    : seed_(seed)
    , engine_(seed)
  {
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal();

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

private:
  std::uint64_t   seed_;
  std::mt19937_64 engine_;
  bool            has_spare_ = false;
  double          spare_     = 0.0;
};

} // namespace hetreg
