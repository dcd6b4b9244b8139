#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace clove {

/// Deterministic random stream.
///
/// Uniform and normal draws are derived from raw engine bits by hand so that
/// sequences do not depend on the standard library's distribution classes.
/// Independent streams are keyed by (seed, tags...) through splitmix64, which
/// lets the trainer rebuild any step's randomness without carrying state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static std::uint64_t mix(std::uint64_t x);
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace clove
