#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace bisup {

uint64_t fnv1a64(std::string_view s);
uint64_t splitmix64(uint64_t x);

// Deterministic RNG wrapper. mt19937_64 has a standardized output sequence,
// and the uniform/normal transforms below avoid std::*_distribution whose
// algorithms differ between standard libraries. Box-Muller keeps one spare
// normal, so draw order is part of the reproducibility contract.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

  // Independent child stream derived from the base seed and a label, so
  // e.g. "calib" and "eval" data never share draws no matter the call order.
  Rng fork(std::string_view tag) const {
    return Rng(splitmix64(seed_ ^ fnv1a64(tag)));
  }

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double normal();

  // inclusive range
  int64_t uniform_int(int64_t lo, int64_t hi);

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace bisup
