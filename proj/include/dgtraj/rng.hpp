#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace dgtraj {

// xoshiro256++. Small, fast, and the full generator state is four u64 words,
// which makes checkpointed training runs bit-reproducible across resume.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1): top 53 bits.
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n);
  // Standard normal. Box-Muller, no pair cache: the four state words are the
  // complete generator state, so serialized state round-trips exactly.
  double normal();
  // Uniformly distributed direction on the unit sphere, written to out[0..2].
  void unit_vector3(double* out);
  // Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(int n);

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

 private:
  std::array<uint64_t, 4> s_{};
};

}  // namespace dgtraj
