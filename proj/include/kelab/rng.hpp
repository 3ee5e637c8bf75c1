#ifndef KELAB_RNG_HPP_
#define KELAB_RNG_HPP_

#include <cstdint>

#include "kelab/linalg.hpp"

namespace kelab {

// Counter-based splittable generator. The stream is pinned byte-for-byte:
//
//   fin(z):   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//             z ^= z >> 27; z *= 0x94D049BB133111EB;
//             z ^= z >> 31;                      (splitmix64 finalizer)
//   word i:   fin(key + (i + 1) * 0x9E3779B97F4A7C15), i counted from 0
//   split(j): child key = fin(fin(key ^ 0x6A09E667F3BCC909)
//                             + j * 0x9E3779B97F4A7C15)
//
//   uniform double [0,1):  (word >> 11) * 2^-53
//   normal:                Box-Muller on (u1 in (0,1], u2 in [0,1));
//                          u1 = ((word >> 11) + 1) * 2^-53;
//                          z0 = sqrt(-2 ln u1) cos(2 pi u2), z1 = ... sin(...);
//                          z0 returned first, z1 cached for the next call.
//   uniform_int(n):        word % n
//
// Identical seed gives an identical stream; callers that run in parallel
// split their seeds instead of sharing one generator.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed)
      : key_(seed), counter_(0), have_cached_(false), cached_(0.0) {}

  std::uint64_t seed() const { return key_; }

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  std::uint64_t uniform_int(std::uint64_t n);  // [0, n)
  double normal();

  SeededRng split(std::uint64_t index) const;

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
  bool have_cached_;
  double cached_;
};

// Matrix of standard-normal draws, filled row-major.
Mat rng_draw(SeededRng& rng, Eigen::Index rows, Eigen::Index cols);

}  // namespace kelab

#endif  // KELAB_RNG_HPP_
