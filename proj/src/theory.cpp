#include "psc/theory.hpp"

#include <cmath>
#include <string>

#include "psc/errors.hpp"
#include "psc/probe_bank.hpp"

namespace psc {

namespace {

constexpr double kSpdMinEig = 1e-9;

// Inverse of an SPD matrix through its eigendecomposition; rejects inputs
// whose smallest eigenvalue falls below kSpdMinEig.
Matrix spd_inverse(const Matrix& s) {
  const EigenDecomposition eig = symmetric_eigen(s);
  for (double lam : eig.values)
    if (lam < kSpdMinEig)
      raise(ErrorCode::kNotSpd, "matrix eigenvalue below " + std::to_string(kSpdMinEig));
  const std::size_t n = s.rows();
  Matrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        acc += eig.vectors(i, k) * eig.vectors(j, k) / eig.values[k];
      inv(i, j) = acc;
      inv(j, i) = acc;
    }
  return inv;
}

double trace_product(const Matrix& a, const Matrix& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) acc += a(i, j) * b(j, i);
  return acc;
}

Matrix diagonal(const Vector& d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

}  // namespace

double gaussian_skl_full(const Vector& mu1, const Matrix& sigma1,
                         const Vector& mu2, const Matrix& sigma2) {
  const std::size_t n = mu1.size();
  if (mu2.size() != n || sigma1.rows() != n || sigma1.cols() != n ||
      sigma2.rows() != n || sigma2.cols() != n)
    raise(ErrorCode::kDimMismatch, "gaussian_skl_full dimension mismatch");
  const Matrix inv1 = spd_inverse(sigma1);
  const Matrix inv2 = spd_inverse(sigma2);
  Vector delta(n);
  for (std::size_t i = 0; i < n; ++i) delta[i] = mu2[i] - mu1[i];
  const double quad = dot(delta, mat_vec(inv1, delta)) + dot(delta, mat_vec(inv2, delta));
  const double tr = trace_product(sigma1, inv2) + trace_product(sigma2, inv1) -
                    2.0 * static_cast<double>(n);
  return 0.5 * (quad + tr);
}

double d_psc(const SourceSpectralModel& model, const BlockTargetSpec& target) {
  if (target.mu_t.size() != model.dim_k || target.sigma_t.rows() != model.dim_k)
    raise(ErrorCode::kDimMismatch, "target support block does not match model");
  if (!(target.nu_t > 0.0)) raise(ErrorCode::kNotSpd, "target residual variance must be > 0");
  if (target.mu_perp_norm_sq < 0.0)
    raise(ErrorCode::kInvalidSpec, "mu_perp_norm_sq must be >= 0");

  const Vector zero(model.dim_k, 0.0);
  const double support =
      gaussian_skl_full(zero, diagonal(model.lambdas), target.mu_t, target.sigma_t);

  const double dk = static_cast<double>(model.dim_d - model.dim_k);
  const double tau = model.tau;
  const double nu = target.nu_t;
  const double residual = 0.5 * ((1.0 / tau + 1.0 / nu) * target.mu_perp_norm_sq +
                                 dk * (tau / nu + nu / tau - 2.0));
  return support + residual;
}

double mean_drift(const RegressorHead& head, const SourceSpectralModel& model,
                  const BlockTargetSpec& target, const Vector& mu_perp) {
  if (head.w.size() != model.dim_d || mu_perp.size() != model.dim_d)
    raise(ErrorCode::kDimMismatch, "mean_drift dimension mismatch");
  if (target.mu_t.size() != model.dim_k)
    raise(ErrorCode::kDimMismatch, "target support mean does not match model");

  const Vector in_support = mat_vec(model.basis_v, mu_perp);
  if (norm(in_support) >= 1e-9)
    raise(ErrorCode::kNotInComplement, "mu_perp has support-space component");
  if (std::abs(norm_sq(mu_perp) - target.mu_perp_norm_sq) >
      1e-9 * (1.0 + target.mu_perp_norm_sq))
    raise(ErrorCode::kInvalidSpec, "mu_perp norm does not match target spec");

  const Vector a = mat_vec(model.basis_v, head.w);
  Vector w_perp = head.w;
  const Vector back = vec_mat(a, model.basis_v);
  for (std::size_t i = 0; i < w_perp.size(); ++i) w_perp[i] -= back[i];
  return dot(a, target.mu_t) + dot(w_perp, mu_perp);
}

DriftReport check_drift_bound(const RegressorHead& head,
                              const SourceSpectralModel& model,
                              const BlockTargetSpec& target,
                              const Vector& mu_perp) {
  DriftReport report;
  report.drift = std::abs(mean_drift(head, model, target, mu_perp));
  report.d_psc_value = d_psc(model, target);

  const Vector a = mat_vec(model.basis_v, head.w);
  Vector w_perp = head.w;
  const Vector back = vec_mat(a, model.basis_v);
  for (std::size_t i = 0; i < w_perp.size(); ++i) w_perp[i] -= back[i];

  double a_lam_a = 0.0;
  double x_sq = 0.0;
  for (std::size_t k = 0; k < model.dim_k; ++k) {
    a_lam_a += a[k] * a[k] * model.lambdas[k];
    x_sq += target.mu_t[k] * target.mu_t[k] / model.lambdas[k];
  }
  const double b_sq = model.tau * norm_sq(w_perp);
  report.x_sq = x_sq;
  report.y_sq = target.mu_perp_norm_sq / model.tau;

  const double sens = std::sqrt(a_lam_a + b_sq);
  report.cs_bound = std::sqrt(report.x_sq + report.y_sq) * sens;
  report.bound_tight = std::sqrt(2.0 * report.d_psc_value) * sens;
  report.bound_loose = std::sqrt(2.0 * report.d_psc_value) *
                       (std::sqrt(a_lam_a) + std::sqrt(model.tau) * norm(w_perp));
  report.slack_tight = report.bound_tight - report.drift;
  report.slack_loose = report.bound_loose - report.bound_tight;

  const double tol = 1e-12 * (1.0 + report.bound_loose);
  if (report.drift > report.cs_bound + tol ||
      report.cs_bound > report.bound_tight + tol ||
      report.bound_tight > report.bound_loose + tol)
    raise(ErrorCode::kBoundViolated, "drift bound chain violated");
  return report;
}

IdentifiabilityReport verify_identifiability(std::size_t k, std::size_t trials,
                                             double tol, std::uint64_t seed) {
  if (k < 1) raise(ErrorCode::kInvalidSpec, "identifiability needs k >= 1");
  const ProbeBank bank = build_probe_bank(k);
  Rng rng(seed);

  IdentifiabilityReport report;
  report.k = k;
  report.trials = trials;
  report.tol = tol;

  for (std::size_t trial = 0; trial < trials; ++trial) {
    const Vector mu = rng.normal_vector(k);
    const Matrix sigma = random_spd(k, rng);

    // Exact analytic probe moments: q^T mu and q^T Sigma q.
    ProbeMoments moments;
    moments.means.resize(bank.size());
    moments.vars.resize(bank.size());
    moments.clamped.assign(bank.size(), 0);
    for (std::size_t q = 0; q < bank.size(); ++q) {
      const double* probe = bank.probes.row(q);
      double mean = 0.0;
      for (std::size_t i = 0; i < k; ++i) mean += probe[i] * mu[i];
      double var = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) var += probe[i] * sigma(i, j) * probe[j];
      moments.means[q] = mean;
      moments.vars[q] = var;
    }

    const RecoveredMoments rec = recover_moments(bank, moments);
    double err = 0.0;
    for (std::size_t i = 0; i < k; ++i) err = std::max(err, std::abs(rec.mu[i] - mu[i]));
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        err = std::max(err, std::abs(rec.sigma(i, j) - sigma(i, j)));

    report.worst_error = std::max(report.worst_error, err);
    if (err < tol) ++report.passes;
  }
  return report;
}

Matrix random_spd(std::size_t n, Rng& rng, double lo, double hi) {
  const Matrix q = orthonormal_columns(rng.normal_matrix(n, n));
  Vector d(n);
  for (double& x : d) x = rng.uniform(lo, hi);
  Matrix sigma(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += q(i, k) * d[k] * q(j, k);
      sigma(i, j) = acc;
      sigma(j, i) = acc;
    }
  return sigma;
}

}  // namespace psc
