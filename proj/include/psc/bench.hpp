#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "psc/adaptation.hpp"
#include "psc/linalg.hpp"
#include "psc/spectral_model.hpp"

namespace psc {

/// Parameterized target shift. Severity 0 is the identity for every family.
struct ShiftSpec {
  enum class Family {
    kSupportRotation,  // rotations mixing the signal input directions
    kSupportScale,     // per-direction rescaling of the signal coordinates
    kResidualLeak,     // additive noise in the trailing input directions
    kMeanDrift,        // constant offset along a seeded direction
    kCompound,         // sequential composition of `parts`
  };

  Family family = Family::kMeanDrift;
  double severity = 0.0;
  std::vector<ShiftSpec> parts;  // kCompound only
};

std::string family_name(ShiftSpec::Family family);
ShiftSpec::Family family_from_name(const std::string& name);

struct TaskDims {
  std::size_t input_dim = 8;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 16;
  std::size_t signal_dims = 3;
};

struct TaskSizes {
  std::size_t source_n = 4096;
  std::size_t stream_batches = 64;
  std::size_t batch_size = 64;
  std::size_t eval_n = 2048;
};

/// Regression task with a covariate-shifted unlabeled target stream. Labels
/// always come from the clean (pre-shift) inputs; the observed target inputs
/// are the shifted ones, so the stream carries no label information.
struct SyntheticTask {
  Matrix source_inputs;
  Vector source_labels;
  std::vector<Matrix> target_batches;
  Matrix target_eval_inputs;
  Vector target_eval_labels;
  double label_noise_sd = 0.0;
};

SyntheticTask gen_synthetic_task(const ShiftSpec& spec, const TaskDims& dims,
                                 const TaskSizes& sizes, std::uint64_t seed);

struct MetricsReport {
  double r2 = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  std::size_t n = 0;
};

MetricsReport evaluate(const Vector& predictions, const Vector& labels);

struct PretrainConfig {
  double lr = 0.01;
  std::size_t max_iters = 6000;
  std::size_t plateau_window = 100;
  double plateau_rel = 1e-6;
};

/// Full-batch training of a fresh regressor on the labeled source set;
/// deterministic in the seed. All parameters (weights, biases, affine, head)
/// are trained here; adaptation later touches only the affine vectors.
ToyRegressor pretrain_regressor(const Matrix& inputs, const Vector& labels,
                                const TaskDims& dims, const PretrainConfig& config,
                                std::uint64_t seed);

struct MethodSpec {
  enum class Kind { kSource, kSsa, kPsc };
  Kind kind = Kind::kSource;
  double lambda = 0.0;  // kPsc only

  std::string name() const;
};

struct ExperimentConfig {
  ShiftSpec shift;
  TaskDims dims;
  TaskSizes sizes;
  std::vector<MethodSpec> methods;
  std::vector<std::uint64_t> seeds;
  AdaptConfig adapt;
  PretrainConfig pretrain;
  KSelection k_select = KSelection::explained_variance(0.99);
};

struct CellResult {
  std::string method;
  std::uint64_t seed;
  MetricsReport metrics;
  double l_psc_final = 0.0;
};

struct ExperimentResults {
  std::vector<CellResult> cells;

  /// Mean metric over seeds for one method name.
  double mean_r2(const std::string& method) const;
};

/// Pretrained regressor plus captured source statistics; reusable across
/// shift families because the source side of a task depends only on the seed.
struct PretrainedSource {
  ToyRegressor regressor;
  SourceSpectralModel model;
};

using PretrainCache = std::map<std::uint64_t, PretrainedSource>;

/// Runs every (method, seed) cell: pretrain on source, capture statistics,
/// adapt on the unlabeled target stream, evaluate on the held-out target set.
/// The adaptation path never sees source samples or target labels.
ExperimentResults run_experiment(const ExperimentConfig& config,
                                 PretrainCache* cache = nullptr);

/// CSV with header method,seed,r2,rmse,mae,l_psc_final; one row per cell plus
/// one mean row per method (seed column "mean").
std::string results_to_csv(const ExperimentConfig& config,
                           const ExperimentResults& results);

ExperimentConfig experiment_config_from_json(const std::string& text);
std::string experiment_config_to_json(const ExperimentConfig& config);

void save_task(const SyntheticTask& task, const std::string& path);
SyntheticTask load_task(const std::string& path);

}  // namespace psc
