#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace retfuse {

// mt19937_64 with hand-pinned output mappings. The engine itself is specified
// bit-exactly by the standard; std::uniform_*_distribution is not, so we do
// the mapping ourselves to keep seeds reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n), n >= 1, by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates; std::shuffle's draw sequence is implementation-defined.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

// Stable per-name sub-seed derivation (FNV-1a folded with the base seed).
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull ^ base;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace retfuse
