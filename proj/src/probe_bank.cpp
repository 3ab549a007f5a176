#include "psc/probe_bank.hpp"

#include <cmath>
#include <string>

#include "psc/errors.hpp"

namespace psc {

namespace {

const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

}  // namespace

std::size_t ProbeBank::axis_index(std::size_t i) const {
  if (i >= k) raise(ErrorCode::kDimMismatch, "axis probe index out of range");
  return i;
}

std::size_t ProbeBank::pair_index(std::size_t i, std::size_t j, bool plus) const {
  if (!(i < j && j < k)) raise(ErrorCode::kDimMismatch, "pair probe index out of range");
  // Pairs are laid out lexicographically after the K axis probes, two slots
  // per pair (plus first).
  const std::size_t rank = i * (2 * k - i - 1) / 2 + (j - i - 1);
  return k + 2 * rank + (plus ? 0 : 1);
}

ProbeBank build_probe_bank(std::size_t k) {
  if (k < 1) raise(ErrorCode::kInvalidSpec, "probe bank needs k >= 1");
  ProbeBank bank;
  bank.k = k;
  bank.probes = Matrix(k * k, k);
  bank.tags.reserve(k * k);
  for (std::size_t i = 0; i < k; ++i) {
    bank.probes(i, i) = 1.0;
    bank.tags.push_back({ProbeKind::kAxis, i, i});
  }
  std::size_t row = k;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      bank.probes(row, i) = kInvSqrt2;
      bank.probes(row, j) = kInvSqrt2;
      bank.tags.push_back({ProbeKind::kPairPlus, i, j});
      ++row;
      bank.probes(row, i) = kInvSqrt2;
      bank.probes(row, j) = -kInvSqrt2;
      bank.tags.push_back({ProbeKind::kPairMinus, i, j});
      ++row;
    }
  }
  return bank;
}

ProbeMoments probe_moments(const ProbeBank& bank, const Matrix& support_coords,
                           double eps_var) {
  if (support_coords.cols() != bank.k)
    raise(ErrorCode::kDimMismatch, "support coordinates do not match probe bank");
  const std::size_t b = support_coords.rows();
  if (b < 2) raise(ErrorCode::kTooFewSamples, "probe moments need B >= 2");

  const std::size_t count = bank.size();
  ProbeMoments out;
  out.means.assign(count, 0.0);
  out.vars.assign(count, 0.0);
  out.clamped.assign(count, 0);

  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t q = 0; q < count; ++q) {
    const ProbeTag& tag = bank.tags[q];
    double sum = 0.0;
    double sum_sq = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
      const double* u = support_coords.row(r);
      double p;
      switch (tag.kind) {
        case ProbeKind::kAxis: p = u[tag.i]; break;
        case ProbeKind::kPairPlus: p = (u[tag.i] + u[tag.j]) * kInvSqrt2; break;
        default: p = (u[tag.i] - u[tag.j]) * kInvSqrt2; break;
      }
      sum += p;
      sum_sq += p * p;
    }
    const double mean = sum * inv_b;
    double var = sum_sq * inv_b - mean * mean;
    if (var < eps_var) {
      var = eps_var;
      out.clamped[q] = 1;
    }
    out.means[q] = mean;
    out.vars[q] = var;
  }
  return out;
}

Vector source_probe_variance(const ProbeBank& bank, const Vector& lambdas) {
  if (lambdas.size() != bank.k)
    raise(ErrorCode::kDimMismatch, "eigenvalue count does not match probe bank");
  Vector out(bank.size(), 0.0);
  for (std::size_t q = 0; q < bank.size(); ++q) {
    const ProbeTag& tag = bank.tags[q];
    out[q] = tag.kind == ProbeKind::kAxis
                 ? lambdas[tag.i]
                 : 0.5 * (lambdas[tag.i] + lambdas[tag.j]);
  }
  return out;
}

RecoveredMoments recover_moments(const ProbeBank& bank, const ProbeMoments& moments) {
  if (moments.means.size() != bank.size() || moments.vars.size() != bank.size())
    raise(ErrorCode::kDimMismatch, "moments do not match probe bank");
  const std::size_t k = bank.k;
  RecoveredMoments out;
  out.mu.resize(k);
  out.sigma = Matrix(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    out.mu[i] = moments.means[bank.axis_index(i)];
    out.sigma(i, i) = moments.vars[bank.axis_index(i)];
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      const double plus = moments.vars[bank.pair_index(i, j, true)];
      const double minus = moments.vars[bank.pair_index(i, j, false)];
      const double cov = 0.5 * (plus - minus);
      out.sigma(i, j) = cov;
      out.sigma(j, i) = cov;
    }
  }
  return out;
}

}  // namespace psc
