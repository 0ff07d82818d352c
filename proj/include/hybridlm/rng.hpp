#pragma once

#include <cstdint>

namespace hybridlm {

// Deterministic generator: xoshiro256** seeded through splitmix64.
// Integer-only core, so the same seed yields the same stream on every
// platform; float conversion uses fixed power-of-two scaling.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // [0, 1), 53-bit resolution
  double uniform();
  float uniform_f32(float lo = 0.0f, float hi = 1.0f);
  // Box-Muller with cached spare
  float normal_f32(float mean = 0.0f, float stddev = 1.0f);
  // unbiased integer in [lo, hi)
  int32_t uniform_int(int32_t lo, int32_t hi);

  // Independent child stream; a pure function of (seed, stream), so forked
  // streams do not depend on how much the parent has been consumed.
  Rng fork(uint64_t stream) const;

  uint64_t seed() const { return seed_; }
  static constexpr const char* kAlgorithm = "xoshiro256** / splitmix64";

 private:
  uint64_t state_[4];
  uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 mixing step, also used to derive stream seeds.
uint64_t splitmix64(uint64_t& state);
uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace hybridlm
