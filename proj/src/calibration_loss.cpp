#include "psc/calibration_loss.hpp"

#include <cmath>
#include <string>

#include <json.hpp>

#include "psc/errors.hpp"

namespace psc {

namespace {

const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

void validate_hyper(const PscHyperParams& hyper) {
  if (!(hyper.c > 0.0)) raise(ErrorCode::kInvalidSpec, "hyperparameter c must be > 0");
  if (!(hyper.gamma > 0.0)) raise(ErrorCode::kInvalidSpec, "hyperparameter gamma must be > 0");
  if (hyper.lambda_res < 0.0) raise(ErrorCode::kInvalidSpec, "lambda_res must be >= 0");
  if (!(hyper.eps_var > 0.0)) raise(ErrorCode::kInvalidSpec, "eps_var must be > 0");
}

double probe_projection(const ProbeTag& tag, const double* u) {
  switch (tag.kind) {
    case ProbeKind::kAxis: return u[tag.i];
    case ProbeKind::kPairPlus: return (u[tag.i] + u[tag.j]) * kInvSqrt2;
    default: return (u[tag.i] - u[tag.j]) * kInvSqrt2;
  }
}

// d SKL / d mu and d SKL / d var at fixed source variance.
double skl_dmu(double lam, double mu, double var) {
  return mu * (1.0 / lam + 1.0 / var);
}

double skl_dvar(double lam, double mu, double var) {
  return 0.5 * (1.0 / lam - (mu * mu + lam) / (var * var));
}

struct HeadProjection {
  Vector a;       // V^s w
  Vector w_perp;  // w - V^{sT} a
};

HeadProjection project_head(const SourceSpectralModel& model, const RegressorHead& head) {
  if (head.w.size() != model.dim_d)
    raise(ErrorCode::kDimMismatch, "head dimension does not match model");
  HeadProjection out;
  out.a = mat_vec(model.basis_v, head.w);
  out.w_perp = head.w;
  const Vector back = vec_mat(out.a, model.basis_v);
  for (std::size_t i = 0; i < out.w_perp.size(); ++i) out.w_perp[i] -= back[i];
  return out;
}

}  // namespace

double gaussian_skl_scalar(double lam_s, double mu_t, double var_t) {
  if (!(lam_s > 0.0) || !(var_t > 0.0))
    raise(ErrorCode::kNonPositiveVariance, "SKL needs positive variances");
  const double mu_sq = mu_t * mu_t;
  return 0.5 * ((mu_sq + var_t) / lam_s + (mu_sq + lam_s) / var_t - 2.0);
}

Vector compute_probe_weights(const RegressorHead& head,
                             const SourceSpectralModel& model,
                             const ProbeBank& bank,
                             const PscHyperParams& hyper) {
  validate_hyper(hyper);
  if (bank.k != model.dim_k)
    raise(ErrorCode::kDimMismatch, "probe bank does not match model support dimension");
  const Vector a = project_head(model, head).a;
  Vector beta(bank.size(), 0.0);
  for (std::size_t q = 0; q < bank.size(); ++q) {
    const double aq = std::abs(probe_projection(bank.tags[q], a.data()));
    beta[q] = std::pow(aq + hyper.c, hyper.gamma);
  }
  return beta;
}

SupportLoss support_loss(const SourceSpectralModel& model, const ProbeBank& bank,
                         const RegressorHead& head, const PscHyperParams& hyper,
                         const ProbeMoments& moments) {
  if (moments.means.size() != bank.size())
    raise(ErrorCode::kDimMismatch, "moments do not match probe bank");
  const Vector src_vars = source_probe_variance(bank, model.lambdas);
  const Vector beta = compute_probe_weights(head, model, bank, hyper);
  SupportLoss out;
  out.per_probe.resize(bank.size());
  double sum = 0.0;
  for (std::size_t q = 0; q < bank.size(); ++q) {
    const double term =
        beta[q] * gaussian_skl_scalar(src_vars[q], moments.means[q], moments.vars[q]);
    out.per_probe[q] = term;
    sum += term;
  }
  out.value = sum / static_cast<double>(bank.size());
  return out;
}

double support_loss_axis_restricted(const SourceSpectralModel& model,
                                    const ProbeBank& bank,
                                    const RegressorHead& head,
                                    const PscHyperParams& hyper,
                                    const ProbeMoments& moments) {
  if (moments.means.size() != bank.size())
    raise(ErrorCode::kDimMismatch, "moments do not match probe bank");
  const Vector src_vars = source_probe_variance(bank, model.lambdas);
  const Vector beta = compute_probe_weights(head, model, bank, hyper);
  double sum = 0.0;
  for (std::size_t q = 0; q < bank.size(); ++q) {
    if (bank.tags[q].kind != ProbeKind::kAxis) continue;
    sum += beta[q] * gaussian_skl_scalar(src_vars[q], moments.means[q], moments.vars[q]);
  }
  // Restricted sums keep the full-bank normalization.
  return sum / static_cast<double>(bank.size());
}

ResidualStats residual_stats(const Matrix& residuals, std::size_t dim_residual,
                             double eps_var) {
  const std::size_t b = residuals.rows();
  if (b < 2) raise(ErrorCode::kTooFewSamples, "residual statistics need B >= 2");
  if (dim_residual < 1) raise(ErrorCode::kDimMismatch, "residual dimension must be >= 1");
  if (!(eps_var > 0.0)) raise(ErrorCode::kInvalidSpec, "eps_var must be > 0");

  const Vector mean = column_means(residuals);
  ResidualStats out;
  out.dim_residual = dim_residual;
  out.mean_norm_sq = norm_sq(mean);
  double acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = residuals.row(i);
    for (std::size_t j = 0; j < residuals.cols(); ++j) {
      const double d = row[j] - mean[j];
      acc += d * d;
    }
  }
  out.nu = acc / (static_cast<double>(b) * static_cast<double>(dim_residual));
  if (out.nu < eps_var) {
    out.nu = eps_var;
    out.nu_clamped = true;
  }
  return out;
}

double residual_loss(double tau, const ResidualStats& stats) {
  if (!(tau > 0.0)) raise(ErrorCode::kNonPositiveTau, "tau must be positive");
  const double mean_term = stats.mean_norm_sq / static_cast<double>(stats.dim_residual) *
                           (1.0 / tau + 1.0 / stats.nu);
  return 0.5 * (mean_term + tau / stats.nu + stats.nu / tau - 2.0);
}

LossReport psc_loss(const SourceSpectralModel& model, const ProbeBank& bank,
                    const RegressorHead& head, const PscHyperParams& hyper,
                    const Matrix& features) {
  validate_hyper(hyper);
  const Matrix u = project_support(model, features);
  const ProbeMoments moments = probe_moments(bank, u, hyper.eps_var);
  const SupportLoss sup = support_loss(model, bank, head, hyper, moments);

  const Matrix residuals = project_residual(model, features);
  const ResidualStats rstats =
      residual_stats(residuals, model.dim_d - model.dim_k, hyper.eps_var);
  const double res = residual_loss(model.tau, rstats);

  LossReport report;
  report.l_sup = sup.value;
  report.l_res = res;
  report.l_psc = sup.value + hyper.lambda_res * res;
  report.per_probe = sup.per_probe;
  report.beta = compute_probe_weights(head, model, bank, hyper);
  report.resid_mean_norm_sq = rstats.mean_norm_sq;
  report.resid_nu = rstats.nu;
  report.clamp_active = rstats.nu_clamped;
  for (std::uint8_t c : moments.clamped)
    if (c) report.clamp_active = true;
  return report;
}

double ssa_loss(const SourceSpectralModel& model, const RegressorHead& head,
                const Matrix& features) {
  const Matrix u = project_support(model, features);
  const std::size_t b = u.rows();
  if (b < 2) raise(ErrorCode::kTooFewSamples, "ssa_loss needs B >= 2");
  const Vector a = project_head(model, head).a;
  const Vector mean = column_means(u);
  const Vector var = column_vars(u);
  double sum = 0.0;
  for (std::size_t k = 0; k < model.dim_k; ++k) {
    const double alpha = 1.0 + std::abs(a[k]);
    const double v = std::max(var[k], model.eps_var);
    sum += alpha * gaussian_skl_scalar(model.lambdas[k], mean[k], v);
  }
  return sum;
}

namespace {

// Shared support-gradient engine: accumulates the chain rule through the
// per-probe batch mean and biased variance into a B x K coefficient matrix,
// then maps back to feature space through V^s.
struct ProbeGradSpec {
  const ProbeTag* tags;
  std::size_t count;
  const double* weights;   // per-probe multiplier (beta or alpha)
  double normalization;    // divides the weighted sum
};

struct SupportGradResult {
  Matrix grad;  // B x D
  bool clamp_active = false;
};

SupportGradResult support_grad(const SourceSpectralModel& model, const Matrix& u,
                               const ProbeMoments& moments, const Vector& src_vars,
                               const ProbeGradSpec& spec) {
  const std::size_t b = u.rows();
  const std::size_t k = u.cols();
  const double inv_b = 1.0 / static_cast<double>(b);

  SupportGradResult out;

  // Per-probe scalar factors for the mean and variance paths.
  Vector mean_coef(spec.count, 0.0);
  Vector var_coef(spec.count, 0.0);
  for (std::size_t q = 0; q < spec.count; ++q) {
    const double w = spec.weights[q] / spec.normalization;
    mean_coef[q] =
        w * skl_dmu(src_vars[q], moments.means[q], moments.vars[q]) * inv_b;
    if (moments.clamped[q]) {
      out.clamp_active = true;
      var_coef[q] = 0.0;
    } else {
      var_coef[q] = w * skl_dvar(src_vars[q], moments.means[q], moments.vars[q]) *
                    2.0 * inv_b;
    }
  }

  Matrix coeff(b, k);  // c_i = sum_q phi_{q,i} q
  for (std::size_t r = 0; r < b; ++r) {
    const double* urow = u.row(r);
    double* crow = coeff.row(r);
    for (std::size_t q = 0; q < spec.count; ++q) {
      const ProbeTag& tag = spec.tags[q];
      const double p = probe_projection(tag, urow);
      const double phi = mean_coef[q] + var_coef[q] * (p - moments.means[q]);
      if (tag.kind == ProbeKind::kAxis) {
        crow[tag.i] += phi;
      } else if (tag.kind == ProbeKind::kPairPlus) {
        crow[tag.i] += phi * kInvSqrt2;
        crow[tag.j] += phi * kInvSqrt2;
      } else {
        crow[tag.i] += phi * kInvSqrt2;
        crow[tag.j] -= phi * kInvSqrt2;
      }
    }
  }
  out.grad = matmul(coeff, model.basis_v);
  return out;
}

}  // namespace

FeatureGrad psc_loss_grad(const SourceSpectralModel& model, const ProbeBank& bank,
                          const RegressorHead& head, const PscHyperParams& hyper,
                          const Matrix& features) {
  validate_hyper(hyper);
  const std::size_t b = features.rows();
  const std::size_t d = model.dim_d;
  const Matrix u = project_support(model, features);
  const ProbeMoments moments = probe_moments(bank, u, hyper.eps_var);
  const Vector src_vars = source_probe_variance(bank, model.lambdas);
  const Vector beta = compute_probe_weights(head, model, bank, hyper);

  ProbeGradSpec spec{bank.tags.data(), bank.size(), beta.data(),
                     static_cast<double>(bank.size())};
  SupportGradResult sup = support_grad(model, u, moments, src_vars, spec);

  FeatureGrad out;
  out.grad = std::move(sup.grad);
  out.clamp_active = sup.clamp_active;

  if (hyper.lambda_res > 0.0) {
    const Matrix residuals = project_residual(model, features);
    const std::size_t dk = d - model.dim_k;
    const ResidualStats rstats = residual_stats(residuals, dk, hyper.eps_var);
    if (rstats.nu_clamped) out.clamp_active = true;

    const Vector rmean = column_means(residuals);
    const double tau = model.tau;
    const double nu = rstats.nu;
    const double dkf = static_cast<double>(dk);
    const double inv_b = 1.0 / static_cast<double>(b);

    // d l_res / d mean_norm_sq and d l_res / d nu.
    const double dl_dm2 = 0.5 / dkf * (1.0 / tau + 1.0 / nu);
    const double dl_dnu =
        rstats.nu_clamped
            ? 0.0
            : 0.5 * (-rstats.mean_norm_sq / (dkf * nu * nu) - tau / (nu * nu) + 1.0 / tau);

    const double mean_scale = hyper.lambda_res * dl_dm2 * 2.0 * inv_b;
    const double dev_scale = hyper.lambda_res * dl_dnu * 2.0 * inv_b / dkf;
    for (std::size_t i = 0; i < b; ++i) {
      double* grow = out.grad.row(i);
      const double* rrow = residuals.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        grow[j] += mean_scale * rmean[j] + dev_scale * (rrow[j] - rmean[j]);
      }
    }
  }
  return out;
}

FeatureGrad ssa_loss_grad(const SourceSpectralModel& model, const RegressorHead& head,
                          const Matrix& features) {
  const Matrix u = project_support(model, features);
  const std::size_t b = u.rows();
  if (b < 2) raise(ErrorCode::kTooFewSamples, "ssa_loss_grad needs B >= 2");
  const std::size_t k = model.dim_k;
  const Vector a = project_head(model, head).a;

  // Axis moments expressed as ProbeMoments over a synthetic axis-only bank.
  ProbeMoments moments;
  moments.means = column_means(u);
  moments.vars = column_vars(u);
  moments.clamped.assign(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    if (moments.vars[i] < model.eps_var) {
      moments.vars[i] = model.eps_var;
      moments.clamped[i] = 1;
    }
  }
  std::vector<ProbeTag> tags(k);
  Vector alpha(k);
  for (std::size_t i = 0; i < k; ++i) {
    tags[i] = {ProbeKind::kAxis, i, i};
    alpha[i] = 1.0 + std::abs(a[i]);
  }

  ProbeGradSpec spec{tags.data(), k, alpha.data(), 1.0};
  SupportGradResult res = support_grad(model, u, moments, model.lambdas, spec);
  return FeatureGrad{std::move(res.grad), res.clamp_active};
}

std::string loss_report_to_json(const LossReport& report) {
  nlohmann::json j;
  j["l_sup"] = report.l_sup;
  j["l_res"] = report.l_res;
  j["l_psc"] = report.l_psc;
  j["per_probe"] = report.per_probe;
  j["beta"] = report.beta;
  j["clamp_active"] = report.clamp_active;
  j["resid_mean_norm_sq"] = report.resid_mean_norm_sq;
  j["resid_nu"] = report.resid_nu;
  return j.dump();
}

}  // namespace psc
