#pragma once

#include <cstddef>
#include <string>

#include "psc/linalg.hpp"

namespace psc {

inline constexpr double kDefaultEpsVar = 1e-8;

/// Eigendecomposition of a symmetric matrix. Eigenvalues are sorted
/// non-increasing; eigenvectors are the matching columns, each with its
/// largest-magnitude entry forced positive (ties broken by lowest index).
struct EigenDecomposition {
  Vector values;
  Matrix vectors;
};

/// Cyclic Jacobi eigensolver for dense symmetric matrices. Converges when the
/// largest off-diagonal magnitude drops below 1e-12 * ||A||_F, capped at 100
/// sweeps.
EigenDecomposition symmetric_eigen(const Matrix& matrix);

/// How many leading eigen-directions the source model keeps.
struct KSelection {
  enum class Mode { kFixed, kExplainedVariance };

  static KSelection fixed(std::size_t k) {
    return KSelection{Mode::kFixed, k, 0.0};
  }
  static KSelection explained_variance(double rho) {
    return KSelection{Mode::kExplainedVariance, 0, rho};
  }

  Mode mode = Mode::kExplainedVariance;
  std::size_t k = 0;    // kFixed only
  double rho = 0.99;    // kExplainedVariance only
};

/// Frozen source statistics: feature mean, top-K eigenbasis (rows of
/// `basis_v`), leading eigenvalues, and the isotropic residual floor `tau`
/// (mean of the trailing eigenvalues). Immutable after fit; safe to share.
struct SourceSpectralModel {
  Vector mu_s;        // D
  Matrix basis_v;     // K x D, orthonormal rows
  Vector lambdas;     // K, non-increasing, clamped >= eps_var
  double tau = 0.0;   // >= eps_var
  std::size_t dim_d = 0;
  std::size_t dim_k = 0;
  double eps_var = kDefaultEpsVar;
};

/// Fits the block spectral model on a feature batch (rows are samples).
/// Covariance uses the unbiased 1/(B-1) normalization.
SourceSpectralModel fit_source_model(const Matrix& features,
                                     const KSelection& select,
                                     double eps_var = kDefaultEpsVar);

/// Coordinates of each sample inside the predictive support: row i holds
/// V^s (z_i - mu_s). Returns a B x K matrix.
Matrix project_support(const SourceSpectralModel& model, const Matrix& features);

/// Ambient residuals outside the support: row i holds
/// (z_i - mu_s) - V^{sT} u_i. Returns a B x D matrix.
Matrix project_residual(const SourceSpectralModel& model, const Matrix& features);

void save_source_model(const SourceSpectralModel& model, const std::string& path);
SourceSpectralModel load_source_model(const std::string& path);

std::string source_model_to_json(const SourceSpectralModel& model);
SourceSpectralModel source_model_from_json(const std::string& text);

}  // namespace psc
