#pragma once

#include <cstdint>

#include "psc/calibration_loss.hpp"
#include "psc/linalg.hpp"
#include "psc/rng.hpp"
#include "psc/spectral_model.hpp"

namespace psc {

/// Gaussian block target: support mean/covariance plus isotropic residual
/// statistics in the orthogonal complement.
struct BlockTargetSpec {
  Vector mu_t;              // K
  Matrix sigma_t;           // K x K SPD
  double mu_perp_norm_sq = 0.0;
  double nu_t = 0.0;        // > 0
};

/// Symmetric KL between two multivariate Gaussians:
///   0.5 * [delta^T (S1^-1 + S2^-1) delta + tr(S1 S2^-1 + S2 S1^-1 - 2 I)].
double gaussian_skl_full(const Vector& mu1, const Matrix& sigma1,
                         const Vector& mu2, const Matrix& sigma2);

/// Block divergence: the support SKL against N(0, diag(lambdas)) plus the
/// unnormalized residual SKL
///   0.5 * [(1/tau + 1/nu) * |mu_perp|^2 + (D-K) * (tau/nu + nu/tau - 2)].
double d_psc(const SourceSpectralModel& model, const BlockTargetSpec& target);

/// Predictive mean drift a^T mu_t + w_perp^T mu_perp for the block model.
double mean_drift(const RegressorHead& head, const SourceSpectralModel& model,
                  const BlockTargetSpec& target, const Vector& mu_perp);

struct DriftReport {
  double drift = 0.0;
  double d_psc_value = 0.0;
  double bound_tight = 0.0;   // sqrt(2 d_psc) * sqrt(a^T L a + tau |w_perp|^2)
  double bound_loose = 0.0;   // sqrt(2 d_psc) * (sqrt(a^T L a) + sqrt(tau) |w_perp|)
  double cs_bound = 0.0;      // sqrt(x^2 + y^2) * sqrt(a^T L a + tau |w_perp|^2)
  double x_sq = 0.0;          // mu_t^T Lambda^-1 mu_t
  double y_sq = 0.0;          // |mu_perp|^2 / tau
  double slack_tight = 0.0;   // bound_tight - drift
  double slack_loose = 0.0;   // bound_loose - bound_tight
};

/// Evaluates the drift bound chain on one instance and enforces
/// drift <= cs_bound <= bound_tight <= bound_loose. A violation indicates an
/// implementation bug and raises BoundViolated.
DriftReport check_drift_bound(const RegressorHead& head,
                              const SourceSpectralModel& model,
                              const BlockTargetSpec& target,
                              const Vector& mu_perp);

struct IdentifiabilityReport {
  std::size_t k = 0;
  std::size_t trials = 0;
  std::size_t passes = 0;
  double worst_error = 0.0;
  double tol = 0.0;
  bool pass() const { return trials > 0 && passes == trials; }
};

/// Samples random (mu, Sigma) pairs, feeds their exact analytic probe moments
/// through recover_moments, and reports the worst recovery error.
IdentifiabilityReport verify_identifiability(std::size_t k, std::size_t trials,
                                             double tol, std::uint64_t seed);

/// Sigma = Q diag(d) Q^T with Q orthonormal from a Gaussian draw and entries
/// of d uniform on [lo, hi].
Matrix random_spd(std::size_t n, Rng& rng, double lo = 0.1, double hi = 10.0);

}  // namespace psc
