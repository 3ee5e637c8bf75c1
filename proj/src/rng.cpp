#include "kelab/rng.hpp"

#include <cmath>

namespace kelab {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kSplitSalt = 0x6A09E667F3BCC909ULL;

std::uint64_t fin(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

}  // namespace

std::uint64_t SeededRng::next_u64() {
  ++counter_;
  return fin(key_ + counter_ * kGolden);
}

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::uniform_int(std::uint64_t n) {
  return next_u64() % n;
}

double SeededRng::normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * M_PI * u2;
  cached_ = r * std::sin(t);
  have_cached_ = true;
  return r * std::cos(t);
}

SeededRng SeededRng::split(std::uint64_t index) const {
  return SeededRng(fin(fin(key_ ^ kSplitSalt) + index * kGolden));
}

Mat rng_draw(SeededRng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      out(i, j) = rng.normal();
    }
  }
  return out;
}

}  // namespace kelab
