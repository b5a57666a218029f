#pragma once

// Deterministic random number generation. Every stochastic component of the
// library draws from Rng so that a run is a pure function of its seed. The
// distribution mappings are pinned here (instead of std::uniform_*) because
// the standard distributions are not required to produce identical streams
// across library implementations.

#include <cstdint>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace mtp {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], both bounds inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
    const std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  // Box-Muller transform; the spare value is cached to keep draws cheap.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Fisher-Yates shuffle driven by this generator.
  template <class T>
  void shuffle(std::vector<T>& xs) {
    for (int i = static_cast<int>(xs.size()) - 1; i > 0; --i) {
      const int j = uniform_int(0, i);
      std::swap(xs[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    shuffle(p);
    return p;
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a, used for config hashing and for deriving named sub-stream seeds.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Derives an independent seed for a named stage from a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = fnv1a64(tag);
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

}  // namespace mtp
