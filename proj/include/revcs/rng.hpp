#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace revcs {

// Counter-based generator: output i depends only on (seed, i), so the state
// transition is a single integer increment and the stream is reproducible
// across runs regardless of how many values were drawn elsewhere.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), counter_(0) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    uint64_t z = seed_ + (counter_++ + 1) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1) with 53 random bits
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; one value per call, no cached spare
  // (keeps the draw count equal to the counter advance, two words per normal)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 0x1.0p-300) u1 = 0x1.0p-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.28318530717958647692 * u2);
  }

  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

 private:
  uint64_t seed_;
  uint64_t counter_;
};

// Fixed seed derivation: every subsystem draws from root ^ hash(purpose), so
// runs are reproducible per subsystem independent of call order.
inline uint64_t derive_seed(uint64_t root, std::string_view purpose) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (char c : purpose) {
    h ^= uint8_t(c);
    h *= 0x100000001B3ull;
  }
  return root ^ h;
}

}  // namespace revcs
