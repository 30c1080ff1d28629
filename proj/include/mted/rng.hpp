#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mted {

// Seedable generator with a serializable state. Normal draws use Box-Muller
// without a cached second value so that the engine state alone determines
// every future draw.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer in [lo, hi].
  int64_t integer(int64_t lo, int64_t hi);
  uint64_t next_u64() { return engine_(); }

  // Independent child stream; does not advance this generator.
  Rng fork(uint64_t salt) const;

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer, used to derive decorrelated seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

}  // namespace mted
