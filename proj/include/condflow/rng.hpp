// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace condflow {

// splitmix64: the seed-derivation primitive. Every derived stream in the
// project comes from chaining this mix, so a (master seed, purpose, index)
// triple always lands on the same stream regardless of call order.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (salt + 1));
  return splitmix64(s);
}

// Subsystem stream ids. A run's master seed is split once per subsystem:
//   stream_seed = mix_seed(master, subsystem)
// and per-sample streams are split again: mix_seed(stream_seed, index).
enum class SeedStream : std::uint64_t {
  data = 1,
  init = 2,
  dequant = 3,
  sampling = 4,
};

inline std::uint64_t subsystem_seed(std::uint64_t master, SeedStream s) {
  return mix_seed(master, static_cast<std::uint64_t>(s));
}

// xoshiro256** with our own uniform/normal transforms. std::* distributions
// are implementation-defined, which would break byte-for-byte reproducibility
// of traces across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
    has_cached_normal_ = false;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; pairs are generated together and the
  // second value is cached, so draw order is fully deterministic.
  double normal();

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
  bool has_cached_normal_;
  double cached_normal_ = 0.0;
};

}  // namespace condflow
