#pragma once

#include <cstdint>
#include <string_view>

namespace p3d {

// Deterministic random streams built on splitmix64. Every consumer derives its
// own stream from (seed, purpose tag, integer keys) instead of sharing one
// global generator, so results are bitwise reproducible regardless of worker
// count and a resumed run can rebuild the exact stream for any epoch or video.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Stream key derivation: FNV-1a over the tag and keys, then one splitmix
  // scramble so nearby keys land far apart.
  static std::uint64_t derive(std::uint64_t seed, std::string_view purpose,
                              std::uint64_t key0 = 0, std::uint64_t key1 = 0) {
    std::uint64_t h = 1469598103934665603ULL;
    auto eat = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 1099511628211ULL;
      }
    };
    eat(seed);
    for (char c : purpose) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    eat(key0);
    eat(key1);
    return scramble(h);
  }

  static Rng stream(std::uint64_t seed, std::string_view purpose,
                    std::uint64_t key0 = 0, std::uint64_t key1 = 0) {
    return Rng(derive(seed, purpose, key0, key1));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return scramble(state_);
  }

  // Uniform in [0,1) with 53 random bits, exact in double.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is below 2^-50 for the small n used
  // here (shuffles, crop corners), far under anything observable.
  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  template <class It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      auto j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  static std::uint64_t scramble(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

}  // namespace p3d
