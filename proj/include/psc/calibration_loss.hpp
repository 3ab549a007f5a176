#pragma once

#include <string>

#include "psc/linalg.hpp"
#include "psc/probe_bank.hpp"
#include "psc/spectral_model.hpp"

namespace psc {

/// Frozen linear head y = w^T z + b.
struct RegressorHead {
  Vector w;
  double b = 0.0;
};

struct PscHyperParams {
  double c = 1.0;          // probe-weight offset, > 0
  double gamma = 1.0;      // probe-weight exponent, > 0
  double lambda_res = 0.0; // residual-term weight, >= 0
  double eps_var = kDefaultEpsVar;
};

/// Batch residual statistics: squared norm of the residual mean and the
/// per-complement-dimension variance nu (clamped at eps_var).
struct ResidualStats {
  double mean_norm_sq = 0.0;
  double nu = 0.0;
  std::size_t dim_residual = 0;
  bool nu_clamped = false;
};

struct LossReport {
  double l_sup = 0.0;
  double l_res = 0.0;
  double l_psc = 0.0;
  Vector per_probe;  // weighted SKL terms; sums to K^2 * l_sup
  Vector beta;       // probe weights
  bool clamp_active = false;
  double resid_mean_norm_sq = 0.0;
  double resid_nu = 0.0;
};

std::string loss_report_to_json(const LossReport& report);

/// Symmetric KL between N(0, lam_s) and N(mu_t, var_t):
///   0.5 * [(mu^2 + var) / lam + (mu^2 + lam) / var - 2].
double gaussian_skl_scalar(double lam_s, double mu_t, double var_t);

/// Prediction-aware probe weights beta_q = (|a^T q| + c)^gamma with
/// a = V^s w.
Vector compute_probe_weights(const RegressorHead& head,
                             const SourceSpectralModel& model,
                             const ProbeBank& bank,
                             const PscHyperParams& hyper);

struct SupportLoss {
  double value = 0.0;
  Vector per_probe;
};

/// Mean weighted SKL over the full probe bank, normalized by K^2.
SupportLoss support_loss(const SourceSpectralModel& model, const ProbeBank& bank,
                         const RegressorHead& head, const PscHyperParams& hyper,
                         const ProbeMoments& moments);

/// Support loss restricted to the axis probes, still normalized by the full
/// bank size K^2.
double support_loss_axis_restricted(const SourceSpectralModel& model,
                                    const ProbeBank& bank,
                                    const RegressorHead& head,
                                    const PscHyperParams& hyper,
                                    const ProbeMoments& moments);

ResidualStats residual_stats(const Matrix& residuals, std::size_t dim_residual,
                             double eps_var);

/// 0.5 * [mean_norm_sq/(D-K) * (1/tau + 1/nu) + tau/nu + nu/tau - 2].
double residual_loss(double tau, const ResidualStats& stats);

/// Full objective on a feature batch: support loss plus lambda_res times the
/// residual loss.
LossReport psc_loss(const SourceSpectralModel& model, const ProbeBank& bank,
                    const RegressorHead& head, const PscHyperParams& hyper,
                    const Matrix& features);

/// Axis-statistics baseline: sum over the K source directions of
/// (1 + |w^T v_k|) * SKL, unnormalized.
double ssa_loss(const SourceSpectralModel& model, const RegressorHead& head,
                const Matrix& features);

struct FeatureGrad {
  Matrix grad;          // B x D, entry (i, d) = d loss / d z_{i,d}
  bool clamp_active = false;
};

/// Exact gradient of psc_loss with respect to the feature batch,
/// differentiating through the batch statistics. Clamped statistics
/// contribute zero gradient and set clamp_active.
FeatureGrad psc_loss_grad(const SourceSpectralModel& model, const ProbeBank& bank,
                          const RegressorHead& head, const PscHyperParams& hyper,
                          const Matrix& features);

/// Exact gradient of ssa_loss with respect to the feature batch.
FeatureGrad ssa_loss_grad(const SourceSpectralModel& model, const RegressorHead& head,
                          const Matrix& features);

}  // namespace psc
