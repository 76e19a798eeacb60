#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "qsvd/matrix.hpp"

namespace qsvd {

// Seeded generator with portable output: mt19937_64 is fully specified by
// the standard, and the distributions below are written out so results do
// not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  DenseMatrix gaussian(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    DenseMatrix m(rows, cols);
    for (double& v : m.values()) v = stddev * normal();
    return m;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace qsvd
