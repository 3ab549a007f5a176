#include <doctest.h>

#include <cmath>

#include "psc/errors.hpp"
#include "psc/linalg.hpp"
#include "psc/rng.hpp"

using namespace psc;

TEST_SUITE("linalg") {

TEST_CASE("matmul and transposed variants agree") {
  Rng rng(11);
  const Matrix a = rng.normal_matrix(4, 6);
  const Matrix b = rng.normal_matrix(6, 3);
  const Matrix ab = matmul(a, b);
  const Matrix ab2 = matmul_bt(a, transpose(b));
  const Matrix ab3 = matmul_at(transpose(a), b);
  CHECK(ab.rows() == 4);
  CHECK(ab.cols() == 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(ab(i, j) == doctest::Approx(ab2(i, j)).epsilon(1e-13));
      CHECK(ab(i, j) == doctest::Approx(ab3(i, j)).epsilon(1e-13));
    }
}

TEST_CASE("matmul rejects mismatched shapes") {
  Matrix a(2, 3), b(2, 3);
  CHECK_THROWS_AS(matmul(a, b), Error);
}

TEST_CASE("identity and vector products") {
  const Matrix id = Matrix::identity(3);
  const Vector x = {1.0, -2.0, 0.5};
  CHECK(mat_vec(id, x) == x);
  CHECK(vec_mat(x, id) == x);
  CHECK(dot(x, x) == doctest::Approx(1.0 + 4.0 + 0.25));
}

TEST_CASE("column statistics") {
  Matrix m(2, 2);
  m(0, 0) = 1.0; m(0, 1) = 4.0;
  m(1, 0) = 3.0; m(1, 1) = 4.0;
  const Vector mean = column_means(m);
  CHECK(mean[0] == doctest::Approx(2.0));
  CHECK(mean[1] == doctest::Approx(4.0));
  const Vector var = column_vars(m);
  CHECK(var[0] == doctest::Approx(1.0));  // biased: ((1-2)^2 + (3-2)^2)/2
  CHECK(var[1] == doctest::Approx(0.0));
}

TEST_CASE("gram-schmidt yields orthonormal columns") {
  Rng rng(5);
  const Matrix q = orthonormal_columns(rng.normal_matrix(8, 8));
  for (std::size_t a = 0; a < 8; ++a)
    for (std::size_t b = 0; b < 8; ++b) {
      double acc = 0.0;
      for (std::size_t r = 0; r < 8; ++r) acc += q(r, a) * q(r, b);
      CHECK(std::abs(acc - (a == b ? 1.0 : 0.0)) < 1e-12);
    }
}

TEST_CASE("finiteness checks") {
  Matrix m(1, 2);
  CHECK(all_finite(m));
  m(0, 1) = std::nan("");
  CHECK_FALSE(all_finite(m));
}

TEST_CASE("rng normal moments") {
  Rng rng(99);
  const std::size_t n = 200000;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sum_sq += x * x;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("derived seeds differ per stream") {
  CHECK(Rng::derive(1, 1) != Rng::derive(1, 2));
  CHECK(Rng::derive(1, 1) != Rng::derive(2, 1));
  CHECK(Rng::derive(1, 1) == Rng::derive(1, 1));
}

}  // TEST_SUITE
