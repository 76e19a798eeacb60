#include "qsvd/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "qsvd/error.hpp"
#include "qsvd/rng.hpp"

namespace qsvd {

namespace {

using Column = std::vector<double>;

double dot(const Column& a, const Column& b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

void rotate(Column& x, Column& y, double c, double s) {
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double xi = x[k];
    const double yi = y[k];
    x[k] = c * xi - s * yi;
    y[k] = s * xi + c * yi;
  }
}

// Extends `basis` (orthonormal columns of length m) with unit vectors taken
// from the standard basis until it has `target` members.
void complete_basis(std::vector<Column>& basis, std::size_t m, std::size_t target) {
  for (std::size_t e = 0; e < m && basis.size() < target; ++e) {
    Column v(m, 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double proj = dot(v, b);
        for (std::size_t k = 0; k < m; ++k) v[k] -= proj * b[k];
      }
    }
    const double norm = std::sqrt(dot(v, v));
    if (norm < 1e-8) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
}

struct TallSvd {
  std::vector<Column> u;  // n columns of length m
  std::vector<double> sigma;
  std::vector<Column> v;  // n columns of length n
};

// Hestenes iteration on a tall (m >= n) matrix given column-major.
TallSvd jacobi_tall(std::vector<Column> cols, std::size_t m, const SvdOptions& options,
                    const std::string& shape) {
  const std::size_t n = cols.size();
  std::vector<Column> v(n, Column(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;

  double fro2 = 0.0;
  for (const auto& c : cols) fro2 += dot(c, c);
  // Columns below rounding noise of the whole matrix cannot be orthogonalized
  // to relative precision; they are treated as exact zeros.
  const double negligible =
      static_cast<double>(std::max(m, n)) * std::numeric_limits<double>::epsilon() * std::sqrt(fro2);
  const double negligible2 = negligible * negligible;

  bool converged = n < 2;
  for (int sweep = 0; sweep < options.max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double alpha = dot(cols[i], cols[i]);
        const double beta = dot(cols[j], cols[j]);
        if (alpha <= negligible2 || beta <= negligible2) continue;
        const double gamma = dot(cols[i], cols[j]);
        if (std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(cols[i], cols[j], c, s);
        rotate(v[i], v[j], c, s);
      }
    }
  }
  if (!converged) {
    throw numerical_error("svd_no_convergence", "svd: no convergence after " +
                                                    std::to_string(options.max_sweeps) +
                                                    " sweeps for matrix " + shape);
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double norm = std::sqrt(dot(cols[j], cols[j]));
    sigma[j] = norm <= negligible ? 0.0 : norm;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  TallSvd out;
  for (std::size_t idx : order) {
    out.sigma.push_back(sigma[idx]);
    out.v.push_back(v[idx]);
    if (sigma[idx] > 0.0) {
      Column u = cols[idx];
      for (double& x : u) x /= sigma[idx];
      out.u.push_back(std::move(u));
    }
  }
  complete_basis(out.u, m, n);
  return out;
}

}  // namespace

SvdResult svd(const DenseMatrix& a, const SvdOptions& options) {
  if (a.empty()) throw usage_error("empty_matrix", "svd: empty matrix " + a.shape_string());
  if (!a.all_finite()) throw numerical_error("non_finite", "svd: non-finite entries in " + a.shape_string());

  const bool transposed = a.rows() < a.cols();
  const DenseMatrix work = transposed ? a.transpose() : a;
  const std::size_t m = work.rows();
  const std::size_t n = work.cols();

  std::vector<Column> cols(n, Column(m));
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) cols[c][r] = work(r, c);

  TallSvd tall = jacobi_tall(std::move(cols), m, options, a.shape_string());

  // work = U S Vᵀ; for the transposed case a = V S Uᵀ.
  const auto& left = transposed ? tall.v : tall.u;
  const auto& right = transposed ? tall.u : tall.v;
  const std::size_t p = n;

  SvdResult out;
  out.sigma = std::move(tall.sigma);
  out.u = DenseMatrix(a.rows(), p);
  out.vt = DenseMatrix(p, a.cols());
  for (std::size_t j = 0; j < p; ++j) {
    double sign = 1.0;
    for (double x : left[j]) {
      if (std::abs(x) > 1e-12) {
        sign = x < 0.0 ? -1.0 : 1.0;
        break;
      }
    }
    for (std::size_t r = 0; r < a.rows(); ++r) out.u(r, j) = sign * left[j][r];
    for (std::size_t c = 0; c < a.cols(); ++c) out.vt(j, c) = sign * right[j][c];
  }
  return out;
}

DenseMatrix reconstruct(const SvdResult& s) { return matmul(scale_columns(s.u, s.sigma), s.vt); }

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

DenseMatrix random_orthogonal(std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw usage_error("invalid_dimension", "random_orthogonal: dim must be >= 1");
  Rng rng(seed);
  const DenseMatrix g = rng.gaussian(dim, dim);

  // Modified Gram-Schmidt with one reorthogonalization pass; positive R
  // diagonal makes the result Haar-distributed.
  std::vector<Column> q;
  q.reserve(dim);
  for (std::size_t c = 0; c < dim; ++c) {
    Column v(dim);
    for (std::size_t r = 0; r < dim; ++r) v[r] = g(r, c);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : q) {
        const double proj = dot(v, b);
        for (std::size_t k = 0; k < dim; ++k) v[k] -= proj * b[k];
      }
    }
    const double norm = std::sqrt(dot(v, v));
    if (norm < 1e-12) throw numerical_error("degenerate_sample", "random_orthogonal: rank-deficient sample");
    for (double& x : v) x /= norm;
    q.push_back(std::move(v));
  }
  DenseMatrix out(dim, dim);
  for (std::size_t c = 0; c < dim; ++c)
    for (std::size_t r = 0; r < dim; ++r) out(r, c) = q[c][r];
  return out;
}

DenseMatrix hadamard(std::size_t dim) {
  if (!is_power_of_two(dim)) {
    throw usage_error("not_power_of_two", "hadamard: dimension " + std::to_string(dim) +
                                              " is not a power of two; use random_orthogonal instead");
  }
  DenseMatrix h(dim, dim);
  h(0, 0) = 1.0;
  for (std::size_t n = 1; n < dim; n *= 2) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double v = h(r, c);
        h(r, c + n) = v;
        h(r + n, c) = v;
        h(r + n, c + n) = -v;
      }
    }
  }
  return h * (1.0 / std::sqrt(static_cast<double>(dim)));
}

}  // namespace qsvd
