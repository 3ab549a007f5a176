#include "psc/linalg.hpp"

#include <cmath>
#include <string>

#include "psc/errors.hpp"

namespace psc {

namespace {

void require_dims(bool ok, const std::string& what) {
  if (!ok) raise(ErrorCode::kDimMismatch, what);
}

}  // namespace

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.rows(), "matmul inner dimensions");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    double* oi = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) oi[j] += aik * bk[j];
    }
  }
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.cols(), "matmul_bt inner dimensions");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* bj = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += ai[k] * bj[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  require_dims(a.rows() == b.rows(), "matmul_at inner dimensions");
  Matrix out(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    const double* bi = b.row(i);
    for (std::size_t r = 0; r < a.cols(); ++r) {
      const double air = ai[r];
      if (air == 0.0) continue;
      double* orow = out.row(r);
      for (std::size_t c = 0; c < b.cols(); ++c) orow[c] += air * bi[c];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Vector mat_vec(const Matrix& a, const Vector& x) {
  require_dims(a.cols() == x.size(), "mat_vec dimensions");
  Vector out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) acc += ai[j] * x[j];
    out[i] = acc;
  }
  return out;
}

Vector vec_mat(const Vector& x, const Matrix& a) {
  require_dims(a.rows() == x.size(), "vec_mat dimensions");
  Vector out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += xi * ai[j];
  }
  return out;
}

double dot(const Vector& a, const Vector& b) {
  require_dims(a.size() == b.size(), "dot dimensions");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm_sq(const Vector& v) { return dot(v, v); }

double norm(const Vector& v) { return std::sqrt(norm_sq(v)); }

double frobenius_norm(const Matrix& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x * x;
  return std::sqrt(acc);
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double x : a.data()) m = std::max(m, std::abs(x));
  return m;
}

double max_abs(const Vector& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

bool all_finite(const Matrix& a) {
  for (double x : a.data())
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const Vector& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Vector column_means(const Matrix& a) {
  Vector mean(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) mean[j] += ai[j];
  }
  const double inv = a.rows() > 0 ? 1.0 / static_cast<double>(a.rows()) : 0.0;
  for (double& m : mean) m *= inv;
  return mean;
}

Vector column_vars(const Matrix& a) {
  const Vector mean = column_means(a);
  Vector var(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double d = ai[j] - mean[j];
      var[j] += d * d;
    }
  }
  const double inv = a.rows() > 0 ? 1.0 / static_cast<double>(a.rows()) : 0.0;
  for (double& v : var) v *= inv;
  return var;
}

Matrix orthonormal_columns(Matrix a) {
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t prev = 0; prev < j; ++prev) {
      double proj = 0.0;
      for (std::size_t r = 0; r < n; ++r) proj += a(r, prev) * a(r, j);
      for (std::size_t r = 0; r < n; ++r) a(r, j) -= proj * a(r, prev);
    }
    double nrm = 0.0;
    for (std::size_t r = 0; r < n; ++r) nrm += a(r, j) * a(r, j);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12)
      raise(ErrorCode::kInvalidSpec, "orthonormal_columns: dependent columns");
    const double inv = 1.0 / nrm;
    for (std::size_t r = 0; r < n; ++r) a(r, j) *= inv;
  }
  return a;
}

}  // namespace psc
