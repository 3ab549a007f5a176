#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "psc/calibration_loss.hpp"
#include "psc/linalg.hpp"
#include "psc/probe_bank.hpp"
#include "psc/spectral_model.hpp"

namespace psc {

/// One feature-extractor block: frozen linear map and normalization
/// statistics, trainable elementwise affine, tanh activation.
struct RegressorBlock {
  Matrix weight;        // out x in, frozen
  Vector bias;          // out, frozen
  Vector norm_mean;     // out, frozen (captured from source)
  Vector norm_var;      // out, frozen, >= eps_var
  Vector affine_scale;  // out, trainable
  Vector affine_shift;  // out, trainable
};

/// Small regressor: stacked blocks feeding a frozen linear head. Only the
/// affine_scale/affine_shift vectors change during adaptation.
struct ToyRegressor {
  std::vector<RegressorBlock> blocks;
  RegressorHead head;
  double eps_var = kDefaultEpsVar;

  std::size_t input_dim() const;
  std::size_t feature_dim() const;
};

/// Per-block intermediates kept for backpropagation.
struct ForwardTrace {
  std::vector<Matrix> inputs;      // inputs[l] feeds block l
  std::vector<Matrix> normalized;  // post-normalization, pre-affine
  std::vector<Matrix> outputs;     // post-tanh
  Vector predictions;

  const Matrix& features() const { return outputs.back(); }
};

ForwardTrace forward_trace(const ToyRegressor& reg, const Matrix& inputs);

/// Runs the regressor: returns (final features, head predictions).
std::pair<Matrix, Vector> forward(const ToyRegressor& reg, const Matrix& inputs);

Vector predict(const ToyRegressor& reg, const Matrix& inputs);

/// Refreshes every block's normalization statistics from the source batch and
/// folds the change into the affine parameters so the network function is
/// unchanged; then fits the spectral source model on the final features.
/// Idempotent on a fixed batch.
SourceSpectralModel capture_source_stats(ToyRegressor& reg, const Matrix& source_inputs,
                                         const KSelection& select,
                                         double eps_var = kDefaultEpsVar);

struct AffineGrads {
  std::vector<Vector> scale;
  std::vector<Vector> shift;

  double norm_sq_total() const;
  bool finite() const;
};

/// Chain rule from a feature-space gradient back to every affine parameter.
AffineGrads backprop_to_affine(const ToyRegressor& reg, const Matrix& inputs,
                               const Matrix& feature_grad);

struct SgdConfig {
  double lr = 1e-3;
  double momentum = 0.0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using OptimizerConfig = std::variant<SgdConfig, AdamConfig>;

/// First-order optimizer over a flat parameter vector with persistent state.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  void step(Vector& params, const Vector& grads);
  void reset();

 private:
  OptimizerConfig config_;
  Vector m_;
  Vector v_;
  std::uint64_t t_ = 0;
};

enum class AdaptMode { kOnline, kEpisodic };
enum class AdaptObjective { kPsc, kSsa };

struct AdaptConfig {
  OptimizerConfig optimizer = AdamConfig{};
  std::size_t steps_per_batch = 1;
  AdaptMode mode = AdaptMode::kOnline;
  AdaptObjective objective = AdaptObjective::kPsc;
  PscHyperParams hyper;
  std::uint64_t seed = 0;
};

struct BatchResult {
  LossReport report;       // loss at batch entry
  double update_norm = 0.0;
  bool skipped = false;    // non-finite forward/gradient; parameters untouched
  double pred_mean = 0.0;
  double pred_var = 0.0;
};

struct AdaptTrace {
  std::vector<LossReport> reports;
  Vector update_norms;
  std::vector<std::uint8_t> skipped;
  Vector pred_mean;
  Vector pred_var;

  std::size_t size() const { return reports.size(); }
};

/// Runs steps_per_batch optimizer updates on the affine parameters against a
/// single batch (fresh optimizer state). Frozen fields are never written.
BatchResult adapt_batch(ToyRegressor& reg, const SourceSpectralModel& model,
                        const ProbeBank& bank, const AdaptConfig& config,
                        const Matrix& batch);

/// Processes a batch stream. Online mode carries parameters and optimizer
/// state across batches; episodic mode restores the initial state before each
/// batch. Batches that produce non-finite values are skipped and flagged.
AdaptTrace adapt_stream(ToyRegressor& reg, const SourceSpectralModel& model,
                        const ProbeBank& bank, const AdaptConfig& config,
                        std::span<const Matrix> batches);

void save_regressor(const ToyRegressor& reg, const std::string& path);
ToyRegressor load_regressor(const std::string& path);
std::string regressor_to_json(const ToyRegressor& reg);
ToyRegressor regressor_from_json(const std::string& text);

void write_trace_csv(const AdaptTrace& trace, const std::string& path);
void write_trace_json(const AdaptTrace& trace, const std::string& path);

}  // namespace psc
