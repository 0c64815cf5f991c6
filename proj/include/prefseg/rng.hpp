#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace prefseg {

/// Derives an independent 64-bit seed from a parent seed, a stream name and
/// an index. All randomness in the project flows through this function.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view stream,
                          std::uint64_t index = 0);

/// Thin wrapper over mt19937_64 with distribution transforms that are
/// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi);
  double normal(double mean = 0.0, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// FNV-1a over a byte range, used for config and parameter hashes.
std::uint64_t fnv1a64(const void* data, std::size_t size,
                      std::uint64_t seed = 1469598103934665603ULL);

}  // namespace prefseg
