#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace fnas {

/// 64-bit FNV-1a, used for seed derivation and artifact digests.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Hex string of fnv1a64 (16 lowercase digits).
std::string digest_hex(std::string_view bytes);

/// Seed for a named sub-stream of a run seed ("data", "init", "droppath", "rrelu", ...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

/// Seeded generator with portable distributions.
///
/// The distributions are implemented here rather than taken from <random> so
/// that a serialized engine state fully determines every later draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view stream) : engine_(derive_seed(seed, stream)) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p) { return uniform() < p; }

  std::string serialize() const;
  void deserialize(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fnas
