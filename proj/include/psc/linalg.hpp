#pragma once

#include <cstddef>
#include <vector>

namespace psc {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles. One sample per row for feature batches.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double value = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, value) {}

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  Vector& data() noexcept { return data_; }
  const Vector& data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

// Products. matmul_bt computes A * B^T, matmul_at computes A^T * B; both avoid
// materializing the transpose.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_bt(const Matrix& a, const Matrix& b);
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Vector mat_vec(const Matrix& a, const Vector& x);
Vector vec_mat(const Vector& x, const Matrix& a);  // x^T A

double dot(const Vector& a, const Vector& b);
double norm_sq(const Vector& v);
double norm(const Vector& v);

double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs(const Vector& v);

bool all_finite(const Matrix& a);
bool all_finite(const Vector& v);

Vector column_means(const Matrix& a);
/// Biased (1/rows) per-column variances.
Vector column_vars(const Matrix& a);

/// Orthonormalizes the columns of `a` in place via modified Gram-Schmidt.
/// Requires numerically independent columns.
Matrix orthonormal_columns(Matrix a);

}  // namespace psc
