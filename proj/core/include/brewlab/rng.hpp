#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace brewlab {

/// Deterministic, platform-independent random stream.
///
/// Streams are addressed by a root seed plus a path of keys, so every consumer
/// (initialization, shuffling, augmentation, noise, ...) draws from its own
/// sequence regardless of how work is scheduled across threads. The engine is
/// SplitMix64 and all distributions are implemented here; nothing depends on
/// the standard library's implementation-defined distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Stream keyed by (seed, name, k0, k1, ...).
  static Rng stream(std::uint64_t seed, std::string_view name,
                    std::initializer_list<std::uint64_t> keys = {});

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer on [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

}  // namespace brewlab
