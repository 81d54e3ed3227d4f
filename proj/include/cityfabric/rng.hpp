#pragma once

#include <cstdint>
#include <random>

namespace cityfabric {

constexpr uint64_t splitmix64(uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic sub-seed for (seed, tag...) so independent draws never share a stream.
constexpr uint64_t derive_seed(uint64_t seed, uint64_t a) noexcept { return splitmix64(seed ^ splitmix64(a)); }
constexpr uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b) noexcept {
  return derive_seed(derive_seed(seed, a), b);
}

// Uniform double in [0, 1) from a 64-bit key.
constexpr double unit_from_bits(uint64_t bits) noexcept { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

using Rng = std::mt19937_64;

// Small counter-based generator for per-object draws where seeding an mt19937 would dominate.
class SplitMix64 {
 public:
  using result_type = uint64_t;
  explicit constexpr SplitMix64(uint64_t seed) noexcept : state_(seed) {}
  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }
  constexpr result_type operator()() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  constexpr double uniform() noexcept { return unit_from_bits((*this)()); }

 private:
  uint64_t state_;
};

}  // namespace cityfabric
