#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace xbnn {

// SplitMix64 step. Doubles as the mixing function for stream keys.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a;
  std::uint64_t h = splitmix64(s);
  s = h ^ (b + 0x9e3779b97f4a7c15ull);
  return splitmix64(s);
}

// Deterministic value stream. A stream keyed by (seed, k0, k1, ...) yields
// the same sequence no matter where or when it is constructed, which is what
// makes per-tile sampling independent of call order and thread schedule.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed) {}

  template <typename... Keys>
  RandomStream(std::uint64_t seed, Keys... keys) : state_(seed) {
    ((state_ = mix_key(state_, static_cast<std::uint64_t>(keys))), ...);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform on [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log() argument.
  double next_unit_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Box-Muller, one value per call (the sine twin is discarded so the draw
  // count per entry is fixed).
  double next_gaussian() {
    const double u1 = next_unit_open();
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

// Key component for strings, so streams can be namespaced ("var", "pgd", ...).
constexpr std::uint64_t stream_tag(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  while (*s) {
    h ^= static_cast<std::uint64_t>(*s++);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace xbnn
