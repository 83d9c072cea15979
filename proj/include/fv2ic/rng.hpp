#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace fv2ic {

// Deterministic random stream. Thin wrapper over mt19937_64 that does its
// own uniform/normal transforms: the std::*_distribution classes are
// implementation-defined, which would break run-to-run reproducibility
// across standard libraries.
//
// Streams are derived, not shared: derive(seed, tag, ids...) hashes the
// parent seed together with a purpose tag so every client / sample / phase
// owns an independent stream and results do not depend on scheduling order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller. The spare value is cached, so a single
  // stream yields a fixed sequence regardless of call sites.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Fork an independent stream from (seed, tag, ids...).
template <typename... Ids>
Rng derive_rng(std::uint64_t seed, std::string_view tag, Ids... ids) {
  std::uint64_t h = detail::splitmix64(seed ^ detail::hash_tag(tag));
  ((h = detail::splitmix64(h ^ static_cast<std::uint64_t>(ids))), ...);
  return Rng(h);
}

}  // namespace fv2ic
