#pragma once

#include <cstdint>
#include <random>

#include "psc/linalg.hpp"

namespace psc {

/// Seeded random source. Gaussian draws use Box-Muller on raw 53-bit
/// uniforms so sequences depend only on the mt19937_64 stream, not on any
/// library distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal();

  Vector normal_vector(std::size_t n);
  Matrix normal_matrix(std::size_t rows, std::size_t cols);

  /// Derives an independent child seed for a named stream. Reusing the same
  /// (master, stream) pair always yields the same child.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t stream);

 private:
  std::mt19937_64 gen_;
};

}  // namespace psc
