#include "qsvd/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "qsvd/error.hpp"

namespace qsvd {

namespace {

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw usage_error("shape_mismatch", std::string(op) + ": shape mismatch " + a.shape_string() +
                                            " vs " + b.shape_string());
  }
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw usage_error("shape_mismatch", "DenseMatrix: data length " + std::to_string(data_.size()) +
                                            " does not match " + shape_string());
  }
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t nr = rows.size();
  const std::size_t nc = nr == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(nr * nc);
  for (const auto& r : rows) {
    if (r.size() != nc) throw usage_error("shape_mismatch", "from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return DenseMatrix(nr, nc, std::move(data));
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> values) {
  DenseMatrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

std::string DenseMatrix::shape_string() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

DenseMatrix DenseMatrix::transpose() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

DenseMatrix DenseMatrix::block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const {
  if (r0 + nr > rows_ || c0 + nc > cols_) {
    throw usage_error("out_of_range", "block: [" + std::to_string(r0) + "+" + std::to_string(nr) + ", " +
                                          std::to_string(c0) + "+" + std::to_string(nc) + "] exceeds " +
                                          shape_string());
  }
  DenseMatrix out(nr, nc);
  for (std::size_t r = 0; r < nr; ++r)
    std::copy_n(data_.data() + (r0 + r) * cols_ + c0, nc, out.data_.data() + r * nc);
  return out;
}

void DenseMatrix::set_block(std::size_t r0, std::size_t c0, const DenseMatrix& src) {
  if (r0 + src.rows_ > rows_ || c0 + src.cols_ > cols_) {
    throw usage_error("out_of_range", "set_block: " + src.shape_string() + " at (" + std::to_string(r0) +
                                          "," + std::to_string(c0) + ") exceeds " + shape_string());
  }
  for (std::size_t r = 0; r < src.rows_; ++r)
    std::copy_n(src.data_.data() + r * src.cols_, src.cols_, data_.data() + (r0 + r) * cols_ + c0);
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
  require_same_shape(*this, other, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
  require_same_shape(*this, other, "sub");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double DenseMatrix::frobenius_norm() const {
  double acc = 0.0;
  for (double v : data_) acc += v * v;
  return std::sqrt(acc);
}

double DenseMatrix::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool DenseMatrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
DenseMatrix operator*(DenseMatrix a, double s) { return a *= s; }
DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw usage_error("shape_mismatch", "matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) {
    throw usage_error("shape_mismatch", "matmul_tn: " + a.shape_string() + "^T x " + b.shape_string());
  }
  DenseMatrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw usage_error("shape_mismatch", "matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  DenseMatrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

DenseMatrix hconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) {
      throw usage_error("shape_mismatch", "hconcat: " + p.shape_string() + " vs " + parts[0].shape_string());
    }
    cols += p.cols();
  }
  DenseMatrix out(parts[0].rows(), cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    out.set_block(0, c0, p);
    c0 += p.cols();
  }
  return out;
}

DenseMatrix vconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) {
      throw usage_error("shape_mismatch", "vconcat: " + p.shape_string() + " vs " + parts[0].shape_string());
    }
    rows += p.rows();
  }
  DenseMatrix out(rows, parts[0].cols());
  std::size_t r0 = 0;
  for (const auto& p : parts) {
    out.set_block(r0, 0, p);
    r0 += p.rows();
  }
  return out;
}

DenseMatrix scale_columns(DenseMatrix m, std::span<const double> s) {
  if (s.size() != m.cols()) throw usage_error("shape_mismatch", "scale_columns: length mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) *= s[c];
  return m;
}

DenseMatrix scale_rows(DenseMatrix m, std::span<const double> s) {
  if (s.size() != m.rows()) throw usage_error("shape_mismatch", "scale_rows: length mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (double& v : m.row(r)) v *= s[r];
  return m;
}

double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "frobenius_inner");
  double acc = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  return acc;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

double relative_frobenius_error(const DenseMatrix& approx, const DenseMatrix& exact) {
  const double denom = exact.frobenius_norm();
  const double num = (approx - exact).frobenius_norm();
  return denom == 0.0 ? num : num / denom;
}

double orthogonality_error(const DenseMatrix& m) {
  return (matmul_tn(m, m) - DenseMatrix::identity(m.cols())).frobenius_norm();
}

DenseMatrix round_to_f32(DenseMatrix m) {
  for (double& v : m.values()) v = static_cast<double>(static_cast<float>(v));
  return m;
}

}  // namespace qsvd
