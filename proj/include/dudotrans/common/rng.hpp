#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace dudotrans {

/// SplitMix64 (Steele, Lea and Flood). Fully specified integer arithmetic, so a
/// given seed yields the same stream on every platform.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform double in (0, 1], safe for log().
  double uniform_open0() { return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Box-Muller standard normal; consumes two uniforms per call.
  double normal() {
    const double u1 = uniform_open0();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

 private:
  std::uint64_t state_;
};

/// Stream-splitting rule: the key for a stream addressed by a list of ids is
/// obtained by folding each id into the running key with one SplitMix64
/// finalization, key <- mix(key ^ id * golden) starting from the seed. Streams
/// for different id tuples are therefore independent of evaluation order.
inline std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t key = seed;
  for (std::uint64_t id : ids) {
    SplitMix64 mix(key ^ (id * 0xD1B54A32D192ED03ULL));
    key = mix.next();
  }
  return key;
}

inline SplitMix64 make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
  return SplitMix64(stream_key(seed, ids));
}

}  // namespace dudotrans
