#include "psc/spectral_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "psc/errors.hpp"

namespace psc {

namespace {

constexpr int kMaxSweeps = 100;

double off_diag_max(const Matrix& a) {
  double m = 0.0;
  for (std::size_t p = 0; p < a.rows(); ++p)
    for (std::size_t q = p + 1; q < a.cols(); ++q)
      m = std::max(m, std::abs(a(p, q)));
  return m;
}

void apply_sign_convention(Matrix& vectors) {
  for (std::size_t j = 0; j < vectors.cols(); ++j) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
      const double mag = std::abs(vectors(i, j));
      if (mag > best) {
        best = mag;
        arg = i;
      }
    }
    if (vectors(arg, j) < 0.0)
      for (std::size_t i = 0; i < vectors.rows(); ++i) vectors(i, j) = -vectors(i, j);
  }
}

void validate_features(const Matrix& features, std::size_t min_rows) {
  if (features.rows() < min_rows)
    raise(ErrorCode::kTooFewSamples, "need at least " + std::to_string(min_rows) +
                                         " samples, got " + std::to_string(features.rows()));
  if (!all_finite(features))
    raise(ErrorCode::kNonFinite, "feature matrix has non-finite entries");
}

}  // namespace

EigenDecomposition symmetric_eigen(const Matrix& matrix) {
  const std::size_t n = matrix.rows();
  if (n == 0 || matrix.cols() != n)
    raise(ErrorCode::kDimMismatch, "symmetric_eigen needs a square matrix");
  if (!all_finite(matrix))
    raise(ErrorCode::kNonFinite, "symmetric_eigen input has non-finite entries");

  const double fnorm = frobenius_norm(matrix);
  double asym = 0.0;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p + 1; q < n; ++q)
      asym = std::max(asym, std::abs(matrix(p, q) - matrix(q, p)));
  if (asym > 1e-12 * fnorm)
    raise(ErrorCode::kNonSymmetric, "asymmetry " + std::to_string(asym));

  Matrix a = matrix;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p + 1; q < n; ++q) {
      const double avg = 0.5 * (a(p, q) + a(q, p));
      a(p, q) = a(q, p) = avg;
    }

  Matrix v = Matrix::identity(n);
  const double conv_tol = 1e-12 * fnorm;

  bool converged = off_diag_max(a) <= conv_tol;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= conv_tol) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        const double theta = 0.5 * (aqq - app) / apq;
        double t;
        if (std::abs(theta) > 1e150) {
          t = 0.5 / theta;
        } else {
          t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
          if (theta < 0.0) t = -t;
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double arp = a(r, p);
          const double arq = a(r, q);
          a(r, p) = a(p, r) = c * arp - s * arq;
          a(r, q) = a(q, r) = s * arp + c * arq;
        }
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p);
          const double vrq = v(r, q);
          v(r, p) = c * vrp - s * vrq;
          v(r, q) = s * vrp + c * vrq;
        }
      }
    }
    converged = off_diag_max(a) <= conv_tol;
  }
  if (!converged)
    raise(ErrorCode::kNoConvergence, "Jacobi sweep cap exceeded");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&a](std::size_t l, std::size_t r) {
    return a(l, l) > a(r, r);
  });

  EigenDecomposition out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
  }
  apply_sign_convention(out.vectors);
  return out;
}

SourceSpectralModel fit_source_model(const Matrix& features,
                                     const KSelection& select,
                                     double eps_var) {
  validate_features(features, 2);
  const std::size_t b = features.rows();
  const std::size_t d = features.cols();
  if (d < 2) raise(ErrorCode::kDimMismatch, "feature dimension must be >= 2");
  if (eps_var <= 0.0) raise(ErrorCode::kInvalidSpec, "eps_var must be positive");

  const Vector mu = column_means(features);
  Matrix centered = features;
  for (std::size_t i = 0; i < b; ++i) {
    double* row = centered.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] -= mu[j];
  }
  Matrix cov = matmul_at(centered, centered);
  const double inv = 1.0 / static_cast<double>(b - 1);
  for (double& x : cov.data()) x *= inv;

  const EigenDecomposition eig = symmetric_eigen(cov);

  std::size_t k = 0;
  if (select.mode == KSelection::Mode::kFixed) {
    if (select.k < 1 || select.k >= d)
      raise(ErrorCode::kInvalidSpec, "fixed K must satisfy 1 <= K < D");
    k = select.k;
  } else {
    if (!(select.rho > 0.0 && select.rho < 1.0))
      raise(ErrorCode::kInvalidSpec, "explained-variance fraction must lie in (0,1)");
    double total = 0.0;
    for (double lam : eig.values) total += std::max(lam, 0.0);
    if (total <= 0.0)
      raise(ErrorCode::kDegenerateK, "zero total variance (constant features)");
    double cum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      cum += std::max(eig.values[j], 0.0);
      if (cum / total >= select.rho) {
        k = j + 1;
        break;
      }
    }
    if (k == 0) k = d;
    if (k >= d)
      raise(ErrorCode::kDegenerateK,
            "explained-variance rule needs K = D; lower rho or use fixed K");
  }

  SourceSpectralModel model;
  model.dim_d = d;
  model.dim_k = k;
  model.eps_var = eps_var;
  model.mu_s = mu;
  model.basis_v = Matrix(k, d);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < d; ++c) model.basis_v(r, c) = eig.vectors(c, r);
  model.lambdas.resize(k);
  for (std::size_t r = 0; r < k; ++r)
    model.lambdas[r] = std::max(eig.values[r], eps_var);
  double trail = 0.0;
  for (std::size_t r = k; r < d; ++r) trail += eig.values[r];
  model.tau = std::max(trail / static_cast<double>(d - k), eps_var);
  return model;
}

Matrix project_support(const SourceSpectralModel& model, const Matrix& features) {
  if (features.cols() != model.dim_d)
    raise(ErrorCode::kDimMismatch, "feature dimension does not match model");
  validate_features(features, 1);
  Matrix centered = features;
  for (std::size_t i = 0; i < centered.rows(); ++i) {
    double* row = centered.row(i);
    for (std::size_t j = 0; j < centered.cols(); ++j) row[j] -= model.mu_s[j];
  }
  return matmul_bt(centered, model.basis_v);
}

Matrix project_residual(const SourceSpectralModel& model, const Matrix& features) {
  if (features.cols() != model.dim_d)
    raise(ErrorCode::kDimMismatch, "feature dimension does not match model");
  validate_features(features, 1);
  Matrix centered = features;
  for (std::size_t i = 0; i < centered.rows(); ++i) {
    double* row = centered.row(i);
    for (std::size_t j = 0; j < centered.cols(); ++j) row[j] -= model.mu_s[j];
  }
  const Matrix u = matmul_bt(centered, model.basis_v);
  const Matrix back = matmul(u, model.basis_v);
  for (std::size_t i = 0; i < centered.rows(); ++i) {
    double* row = centered.row(i);
    const double* bi = back.row(i);
    for (std::size_t j = 0; j < centered.cols(); ++j) row[j] -= bi[j];
  }
  return centered;
}

namespace {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty())
    raise(ErrorCode::kBadFile, "expected a non-empty array of rows");
  const std::size_t rows = j.size();
  const std::size_t cols = j.at(0).size();
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto& row = j.at(i);
    if (row.size() != cols) raise(ErrorCode::kBadFile, "ragged matrix rows");
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = row.at(c).get<double>();
  }
  return m;
}

void validate_model(const SourceSpectralModel& m) {
  if (m.dim_k < 1 || m.dim_k >= m.dim_d)
    raise(ErrorCode::kBadFile, "model requires 1 <= K < D");
  if (m.mu_s.size() != m.dim_d || m.basis_v.rows() != m.dim_k ||
      m.basis_v.cols() != m.dim_d || m.lambdas.size() != m.dim_k)
    raise(ErrorCode::kBadFile, "model field dimensions are inconsistent");
  if (m.eps_var <= 0.0 || m.tau < m.eps_var)
    raise(ErrorCode::kBadFile, "model tau/eps_var out of range");
  for (std::size_t i = 0; i < m.dim_k; ++i) {
    if (m.lambdas[i] < m.eps_var)
      raise(ErrorCode::kBadFile, "model eigenvalue below clamp floor");
    if (i > 0 && m.lambdas[i] > m.lambdas[i - 1])
      raise(ErrorCode::kBadFile, "model eigenvalues not sorted");
  }
  const Matrix gram = matmul_bt(m.basis_v, m.basis_v);
  for (std::size_t r = 0; r < m.dim_k; ++r)
    for (std::size_t c = 0; c < m.dim_k; ++c) {
      const double want = r == c ? 1.0 : 0.0;
      if (std::abs(gram(r, c) - want) > 1e-10)
        raise(ErrorCode::kBadFile, "model basis rows are not orthonormal");
    }
}

}  // namespace

std::string source_model_to_json(const SourceSpectralModel& model) {
  json j;
  j["version"] = 1;
  j["d"] = model.dim_d;
  j["k"] = model.dim_k;
  j["mu_s"] = model.mu_s;
  j["basis_v"] = matrix_to_json(model.basis_v);
  j["lambdas"] = model.lambdas;
  j["tau"] = model.tau;
  j["eps_var"] = model.eps_var;
  return j.dump(2);
}

SourceSpectralModel source_model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("model JSON parse failure: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != 1)
      raise(ErrorCode::kBadFile, "unknown model file version");
    SourceSpectralModel m;
    m.dim_d = j.at("d").get<std::size_t>();
    m.dim_k = j.at("k").get<std::size_t>();
    m.mu_s = j.at("mu_s").get<Vector>();
    m.basis_v = matrix_from_json(j.at("basis_v"));
    m.lambdas = j.at("lambdas").get<Vector>();
    m.tau = j.at("tau").get<double>();
    m.eps_var = j.at("eps_var").get<double>();
    validate_model(m);
    return m;
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("model JSON field failure: ") + e.what());
  }
}

void save_source_model(const SourceSpectralModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::kIoError, "cannot open for writing: " + path);
  out << source_model_to_json(model) << '\n';
  if (!out) raise(ErrorCode::kIoError, "write failure: " + path);
}

SourceSpectralModel load_source_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::kIoError, "cannot open for reading: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return source_model_from_json(buf.str());
}

}  // namespace psc
