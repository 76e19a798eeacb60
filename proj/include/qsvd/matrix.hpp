#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace qsvd {

// Row-major dense matrix of doubles. Shapes are checked on every binary
// operation; a mismatch throws a usage error carrying both shapes.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static DenseMatrix identity(std::size_t n);
  static DenseMatrix diagonal(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::string shape_string() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  DenseMatrix transpose() const;
  DenseMatrix block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const;
  void set_block(std::size_t r0, std::size_t c0, const DenseMatrix& src);
  DenseMatrix column(std::size_t c) const { return block(0, c, rows_, 1); }

  DenseMatrix& operator+=(const DenseMatrix& other);
  DenseMatrix& operator-=(const DenseMatrix& other);
  DenseMatrix& operator*=(double s);

  double frobenius_norm() const;
  double max_abs() const;
  bool all_finite() const;

  // Exact element-wise equality (bitwise for non-NaN values).
  friend bool operator==(const DenseMatrix& a, const DenseMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator*(DenseMatrix a, double s);
DenseMatrix operator*(double s, DenseMatrix a);

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// aᵀ·b without materializing the transpose.
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
// a·bᵀ without materializing the transpose.
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);

// Horizontal concatenation [a | b | ...]; all parts share the row count.
DenseMatrix hconcat(std::span<const DenseMatrix> parts);
// Vertical stack of parts sharing the column count.
DenseMatrix vconcat(std::span<const DenseMatrix> parts);

// Scales column j of m by s[j].
DenseMatrix scale_columns(DenseMatrix m, std::span<const double> s);
// Scales row i of m by s[i].
DenseMatrix scale_rows(DenseMatrix m, std::span<const double> s);

double frobenius_inner(const DenseMatrix& a, const DenseMatrix& b);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);
double relative_frobenius_error(const DenseMatrix& approx, const DenseMatrix& exact);
// ‖mᵀm − I‖_F
double orthogonality_error(const DenseMatrix& m);

// Rounds every entry to the nearest binary32 value.
DenseMatrix round_to_f32(DenseMatrix m);

}  // namespace qsvd
