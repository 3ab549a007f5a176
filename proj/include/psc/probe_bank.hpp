#pragma once

#include <cstdint>
#include <vector>

#include "psc/linalg.hpp"
#include "psc/spectral_model.hpp"

namespace psc {

enum class ProbeKind { kAxis, kPairPlus, kPairMinus };

struct ProbeTag {
  ProbeKind kind;
  std::size_t i;
  std::size_t j;  // equals i for axis probes
};

/// The K^2 unit probes spanning the support subspace: the K canonical axes
/// followed by the normalized pairwise sums and differences, ordered axis
/// probes by index, then pairs by (i, j) lexicographic with the plus probe
/// before the minus probe.
struct ProbeBank {
  std::size_t k = 0;
  Matrix probes;               // K^2 x K, one unit probe per row
  std::vector<ProbeTag> tags;  // K^2 entries

  std::size_t size() const { return tags.size(); }
  std::size_t axis_index(std::size_t i) const;
  std::size_t pair_index(std::size_t i, std::size_t j, bool plus) const;
};

ProbeBank build_probe_bank(std::size_t k);

/// Per-probe batch statistics of the projections q^T u_i. Variances are the
/// biased 1/B estimates, clamped from below at eps_var; `clamped` records
/// which entries the clamp actually moved.
struct ProbeMoments {
  Vector means;
  Vector vars;
  std::vector<std::uint8_t> clamped;
};

ProbeMoments probe_moments(const ProbeBank& bank, const Matrix& support_coords,
                           double eps_var);

/// Source variance along each probe, q^T diag(lambdas) q: the eigenvalue for
/// axis probes and the eigenvalue average for pair probes.
Vector source_probe_variance(const ProbeBank& bank, const Vector& lambdas);

struct RecoveredMoments {
  Vector mu;     // K
  Matrix sigma;  // K x K, symmetric by construction
};

/// Reassembles the full first- and second-order structure of the projected
/// batch from the probe moments alone.
RecoveredMoments recover_moments(const ProbeBank& bank, const ProbeMoments& moments);

}  // namespace psc
