#pragma once

#include <cstdint>
#include <vector>

#include "qsvd/matrix.hpp"

namespace qsvd {

// Thin SVD a = u · diag(sigma) · vt with p = min(m, n).
struct SvdResult {
  DenseMatrix u;              // m x p, orthonormal columns
  std::vector<double> sigma;  // p values, descending, non-negative
  DenseMatrix vt;             // p x n, orthonormal rows
};

struct SvdOptions {
  int max_sweeps = 100;
  double tolerance = 1e-12;  // relative off-diagonal threshold
};

/// One-sided (Hestenes) Jacobi SVD.
///
/// Ties among equal singular values keep their original column order and
/// each left singular vector is sign-normalized so that its first
/// non-negligible entry is positive. Zero singular values get left vectors
/// completed to an orthonormal set, so uᵀu = I always holds.
///
/// Throws a numerical error naming the matrix shape if the sweep cap is hit.
SvdResult svd(const DenseMatrix& a, const SvdOptions& options = {});

// u · diag(sigma) · vt
DenseMatrix reconstruct(const SvdResult& s);

// Haar-distributed orthogonal matrix from the QR of a seeded Gaussian.
DenseMatrix random_orthogonal(std::size_t dim, std::uint64_t seed);

// Normalized Sylvester-Hadamard matrix; dim must be a power of two.
DenseMatrix hadamard(std::size_t dim);

bool is_power_of_two(std::size_t n);

}  // namespace qsvd
