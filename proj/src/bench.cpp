#include "psc/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "psc/errors.hpp"
#include "psc/rng.hpp"

namespace psc {

namespace {

// Seed streams for the independent random sources of a task. The source-side
// streams (geometry, inputs, label noise) never depend on the shift family,
// so pretrained source models are reusable across families at a fixed seed.
enum Stream : std::uint64_t {
  kStreamGeometry = 1,
  kStreamSourceInputs = 2,
  kStreamSourceNoise = 3,
  kStreamTargetInputs = 4,
  kStreamTargetShift = 5,
  kStreamEvalInputs = 6,
  kStreamEvalNoise = 7,
  kStreamEvalShift = 8,
  kStreamPretrainInit = 9,
};

struct TaskGeometry {
  Matrix basis;      // input_dim x input_dim, orthonormal columns
  Vector stds;       // per-direction standard deviation
  Vector coefs;      // label coefficients over the signal directions
  Vector drift_dir;  // unit drift direction in task coordinates
  std::size_t signal_dims = 0;
};

TaskGeometry make_geometry(const TaskDims& dims, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, kStreamGeometry));
  TaskGeometry geom;
  geom.signal_dims = dims.signal_dims;
  geom.basis = orthonormal_columns(rng.normal_matrix(dims.input_dim, dims.input_dim));
  geom.stds.resize(dims.input_dim);
  for (std::size_t j = 0; j < dims.input_dim; ++j) {
    geom.stds[j] = j < dims.signal_dims
                       ? 2.0 * std::pow(0.85, static_cast<double>(j))
                       : 0.3;
  }
  geom.coefs.resize(dims.signal_dims);
  for (double& c : geom.coefs) {
    const double mag = rng.uniform(0.6, 1.0);
    c = rng.uniform() < 0.5 ? -mag : mag;
  }
  geom.drift_dir = rng.normal_vector(dims.input_dim);
  const double n = norm(geom.drift_dir);
  for (double& x : geom.drift_dir) x /= n;
  return geom;
}

// Samples task coordinates (one row per sample); x = basis * coords.
Matrix sample_coords(const TaskGeometry& geom, std::size_t n, Rng& rng) {
  Matrix z(n, geom.stds.size());
  for (std::size_t i = 0; i < n; ++i) {
    double* row = z.row(i);
    for (std::size_t j = 0; j < geom.stds.size(); ++j)
      row[j] = geom.stds[j] * rng.normal();
  }
  return z;
}

// Label slope: steeper maps force the fitted network to use the saturating
// range of its activations, which is what makes variance miscalibration at
// test time genuinely damaging (and recalibration genuinely useful).
constexpr double kLabelSlope = 2.5;

Vector clean_labels(const TaskGeometry& geom, const Matrix& coords) {
  Vector y(coords.rows(), 0.0);
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    const double* row = coords.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < geom.signal_dims; ++j)
      acc += geom.coefs[j] * std::tanh(kLabelSlope * row[j] / geom.stds[j]);
    y[i] = acc;
  }
  return y;
}

Matrix coords_to_inputs(const TaskGeometry& geom, const Matrix& coords) {
  return matmul_bt(coords, geom.basis);  // rows x_i = basis * z_i
}

void validate_shift(const ShiftSpec& spec) {
  if (spec.severity < 0.0)
    raise(ErrorCode::kInvalidSpec, "shift severity must be >= 0");
  if (spec.family == ShiftSpec::Family::kCompound) {
    for (const ShiftSpec& part : spec.parts) {
      if (part.family == ShiftSpec::Family::kCompound)
        raise(ErrorCode::kInvalidSpec, "compound shifts cannot nest");
      validate_shift(part);
    }
  } else if (!spec.parts.empty()) {
    raise(ErrorCode::kInvalidSpec, "only compound shifts take parts");
  }
}

void rotate_pair(Matrix& coords, std::size_t a, std::size_t b, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    double* row = coords.row(i);
    const double za = row[a];
    const double zb = row[b];
    row[a] = c * za - s * zb;
    row[b] = s * za + c * zb;
  }
}

// Applies one shift family to task coordinates in place. `rng` feeds the
// per-sample leak noise only.
void apply_shift(const ShiftSpec& spec, const TaskGeometry& geom, Rng& rng,
                 Matrix& coords) {
  const std::size_t sig = geom.signal_dims;
  const std::size_t total = geom.stds.size();
  switch (spec.family) {
    case ShiftSpec::Family::kSupportRotation: {
      // Consecutive coordinate-plane rotations with decaying angle; a single
      // signal dimension still rotates into its first neighbor.
      double angle = spec.severity;
      const std::size_t last = std::max<std::size_t>(sig, 2);
      for (std::size_t j = 0; j + 1 < last && j + 1 < total; ++j) {
        rotate_pair(coords, j, j + 1, angle);
        angle *= 0.7;
      }
      break;
    }
    case ShiftSpec::Family::kSupportScale: {
      for (std::size_t j = 0; j < sig; ++j) {
        const double factor =
            j % 2 == 0 ? 1.0 + spec.severity : 1.0 / (1.0 + spec.severity);
        for (std::size_t i = 0; i < coords.rows(); ++i) coords(i, j) *= factor;
      }
      break;
    }
    case ShiftSpec::Family::kResidualLeak: {
      for (std::size_t i = 0; i < coords.rows(); ++i) {
        double* row = coords.row(i);
        for (std::size_t j = sig; j < total; ++j)
          row[j] += spec.severity * rng.normal();
      }
      break;
    }
    case ShiftSpec::Family::kMeanDrift: {
      for (std::size_t i = 0; i < coords.rows(); ++i) {
        double* row = coords.row(i);
        for (std::size_t j = 0; j < total; ++j)
          row[j] += spec.severity * geom.drift_dir[j];
      }
      break;
    }
    case ShiftSpec::Family::kCompound: {
      for (const ShiftSpec& part : spec.parts) apply_shift(part, geom, rng, coords);
      break;
    }
  }
}

}  // namespace

std::string family_name(ShiftSpec::Family family) {
  switch (family) {
    case ShiftSpec::Family::kSupportRotation: return "support_rotation";
    case ShiftSpec::Family::kSupportScale: return "support_scale";
    case ShiftSpec::Family::kResidualLeak: return "residual_leak";
    case ShiftSpec::Family::kMeanDrift: return "mean_drift";
    case ShiftSpec::Family::kCompound: return "compound";
  }
  return "unknown";
}

ShiftSpec::Family family_from_name(const std::string& name) {
  if (name == "support_rotation") return ShiftSpec::Family::kSupportRotation;
  if (name == "support_scale") return ShiftSpec::Family::kSupportScale;
  if (name == "residual_leak") return ShiftSpec::Family::kResidualLeak;
  if (name == "mean_drift") return ShiftSpec::Family::kMeanDrift;
  if (name == "compound") return ShiftSpec::Family::kCompound;
  raise(ErrorCode::kInvalidSpec, "unknown shift family: " + name);
}

SyntheticTask gen_synthetic_task(const ShiftSpec& spec, const TaskDims& dims,
                                 const TaskSizes& sizes, std::uint64_t seed) {
  if (dims.input_dim < 2 || dims.signal_dims < 1 ||
      dims.signal_dims >= dims.input_dim)
    raise(ErrorCode::kInvalidSpec, "need 1 <= signal_dims < input_dim and input_dim >= 2");
  if (sizes.source_n < 2 || sizes.eval_n < 2 || sizes.batch_size < 2)
    raise(ErrorCode::kInvalidSpec, "sample counts must be >= 2");
  validate_shift(spec);

  const TaskGeometry geom = make_geometry(dims, seed);
  SyntheticTask task;

  {
    Rng rng_inputs(Rng::derive(seed, kStreamSourceInputs));
    const Matrix coords = sample_coords(geom, sizes.source_n, rng_inputs);
    task.source_inputs = coords_to_inputs(geom, coords);
    Vector labels = clean_labels(geom, coords);
    double mean = 0.0;
    for (double y : labels) mean += y;
    mean /= static_cast<double>(labels.size());
    double var = 0.0;
    for (double y : labels) var += (y - mean) * (y - mean);
    var /= static_cast<double>(labels.size());
    // Noise floor giving an oracle R^2 of about 0.95 on clean data.
    task.label_noise_sd = std::sqrt(var / 19.0);
    Rng rng_noise(Rng::derive(seed, kStreamSourceNoise));
    for (double& y : labels) y += task.label_noise_sd * rng_noise.normal();
    task.source_labels = std::move(labels);
  }

  {
    Rng rng_inputs(Rng::derive(seed, kStreamTargetInputs));
    Rng rng_shift(Rng::derive(seed, kStreamTargetShift));
    task.target_batches.reserve(sizes.stream_batches);
    for (std::size_t b = 0; b < sizes.stream_batches; ++b) {
      Matrix coords = sample_coords(geom, sizes.batch_size, rng_inputs);
      apply_shift(spec, geom, rng_shift, coords);
      task.target_batches.push_back(coords_to_inputs(geom, coords));
    }
  }

  {
    Rng rng_inputs(Rng::derive(seed, kStreamEvalInputs));
    Rng rng_noise(Rng::derive(seed, kStreamEvalNoise));
    Rng rng_shift(Rng::derive(seed, kStreamEvalShift));
    Matrix coords = sample_coords(geom, sizes.eval_n, rng_inputs);
    Vector labels = clean_labels(geom, coords);
    for (double& y : labels) y += task.label_noise_sd * rng_noise.normal();
    task.target_eval_labels = std::move(labels);
    apply_shift(spec, geom, rng_shift, coords);
    task.target_eval_inputs = coords_to_inputs(geom, coords);
  }
  return task;
}

MetricsReport evaluate(const Vector& predictions, const Vector& labels) {
  if (predictions.size() != labels.size())
    raise(ErrorCode::kDimMismatch, "prediction/label count mismatch");
  const std::size_t n = labels.size();
  if (n < 2) raise(ErrorCode::kTooFewSamples, "evaluate needs n >= 2");
  if (!all_finite(predictions) || !all_finite(labels))
    raise(ErrorCode::kNonFinite, "non-finite predictions or labels");

  double mean = 0.0;
  for (double y : labels) mean += y;
  mean /= static_cast<double>(n);

  double sse = 0.0;
  double sst = 0.0;
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double err = labels[i] - predictions[i];
    sse += err * err;
    abs_sum += std::abs(err);
    const double dev = labels[i] - mean;
    sst += dev * dev;
  }
  if (sst == 0.0) raise(ErrorCode::kConstantLabels, "labels are all equal");

  MetricsReport report;
  report.n = n;
  report.r2 = 1.0 - sse / sst;
  report.rmse = std::sqrt(sse / static_cast<double>(n));
  report.mae = abs_sum / static_cast<double>(n);
  return report;
}

namespace {

// Gradients of the mean-squared error with respect to every parameter.
struct FullGrads {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  std::vector<Vector> scale;
  std::vector<Vector> shift;
  Vector head_w;
  double head_b = 0.0;
};

FullGrads mse_grads(const ToyRegressor& reg, const ForwardTrace& trace,
                    const Vector& labels) {
  const std::size_t b = labels.size();
  const double inv_n = 1.0 / static_cast<double>(b);
  const std::size_t nblocks = reg.blocks.size();

  Vector dpred(b);
  for (std::size_t i = 0; i < b; ++i)
    dpred[i] = 2.0 * inv_n * (trace.predictions[i] - labels[i]);

  FullGrads grads;
  grads.weight.resize(nblocks);
  grads.bias.resize(nblocks);
  grads.scale.resize(nblocks);
  grads.shift.resize(nblocks);

  const Matrix& features = trace.features();
  const std::size_t d = features.cols();
  grads.head_w.assign(d, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const double* zi = features.row(i);
    for (std::size_t j = 0; j < d; ++j) grads.head_w[j] += dpred[i] * zi[j];
    grads.head_b += dpred[i];
  }

  Matrix dy(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    double* row = dy.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] = dpred[i] * reg.head.w[j];
  }

  for (std::size_t l = nblocks; l-- > 0;) {
    const RegressorBlock& blk = reg.blocks[l];
    const Matrix& y = trace.outputs[l];
    const Matrix& n = trace.normalized[l];
    const Matrix& x = trace.inputs[l];
    const std::size_t out = blk.weight.rows();

    grads.scale[l].assign(out, 0.0);
    grads.shift[l].assign(out, 0.0);
    grads.bias[l].assign(out, 0.0);

    Matrix dh(b, out);
    for (std::size_t i = 0; i < b; ++i) {
      const double* yr = y.row(i);
      const double* nr = n.row(i);
      const double* dyr = dy.row(i);
      double* dhr = dh.row(i);
      for (std::size_t j = 0; j < out; ++j) {
        const double da = dyr[j] * (1.0 - yr[j] * yr[j]);
        grads.scale[l][j] += da * nr[j];
        grads.shift[l][j] += da;
        const double dhij = da * blk.affine_scale[j] / std::sqrt(blk.norm_var[j]);
        dhr[j] = dhij;
        grads.bias[l][j] += dhij;
      }
    }
    grads.weight[l] = matmul_at(dh, x);
    if (l > 0) dy = matmul(dh, blk.weight);
  }
  return grads;
}

Vector flatten_params(const ToyRegressor& reg) {
  Vector flat;
  for (const RegressorBlock& blk : reg.blocks) {
    flat.insert(flat.end(), blk.weight.data().begin(), blk.weight.data().end());
    flat.insert(flat.end(), blk.bias.begin(), blk.bias.end());
    flat.insert(flat.end(), blk.affine_scale.begin(), blk.affine_scale.end());
    flat.insert(flat.end(), blk.affine_shift.begin(), blk.affine_shift.end());
  }
  flat.insert(flat.end(), reg.head.w.begin(), reg.head.w.end());
  flat.push_back(reg.head.b);
  return flat;
}

void unflatten_params(ToyRegressor& reg, const Vector& flat) {
  std::size_t pos = 0;
  for (RegressorBlock& blk : reg.blocks) {
    for (double& x : blk.weight.data()) x = flat[pos++];
    for (double& x : blk.bias) x = flat[pos++];
    for (double& x : blk.affine_scale) x = flat[pos++];
    for (double& x : blk.affine_shift) x = flat[pos++];
  }
  for (double& x : reg.head.w) x = flat[pos++];
  reg.head.b = flat[pos++];
}

Vector flatten_grads(const FullGrads& grads) {
  Vector flat;
  for (std::size_t l = 0; l < grads.weight.size(); ++l) {
    flat.insert(flat.end(), grads.weight[l].data().begin(), grads.weight[l].data().end());
    flat.insert(flat.end(), grads.bias[l].begin(), grads.bias[l].end());
    flat.insert(flat.end(), grads.scale[l].begin(), grads.scale[l].end());
    flat.insert(flat.end(), grads.shift[l].begin(), grads.shift[l].end());
  }
  flat.insert(flat.end(), grads.head_w.begin(), grads.head_w.end());
  flat.push_back(grads.head_b);
  return flat;
}

}  // namespace

ToyRegressor pretrain_regressor(const Matrix& inputs, const Vector& labels,
                                const TaskDims& dims, const PretrainConfig& config,
                                std::uint64_t seed) {
  if (inputs.rows() != labels.size())
    raise(ErrorCode::kDimMismatch, "input/label count mismatch");
  if (inputs.cols() != dims.input_dim)
    raise(ErrorCode::kDimMismatch, "input dimension does not match dims");
  if (inputs.rows() < 2) raise(ErrorCode::kTooFewSamples, "pretraining needs n >= 2");

  Rng rng(Rng::derive(seed, kStreamPretrainInit));
  ToyRegressor reg;
  const std::size_t widths[3] = {dims.input_dim, dims.hidden_dim, dims.feature_dim};
  for (std::size_t l = 0; l < 2; ++l) {
    RegressorBlock blk;
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    blk.weight = rng.normal_matrix(out, in);
    const double init_sd = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& x : blk.weight.data()) x *= init_sd;
    blk.bias.assign(out, 0.0);
    blk.norm_mean.assign(out, 0.0);
    blk.norm_var.assign(out, 1.0);
    blk.affine_scale.assign(out, 1.0);
    blk.affine_shift.assign(out, 0.0);
    reg.blocks.push_back(std::move(blk));
  }
  reg.head.w = rng.normal_vector(dims.feature_dim);
  const double head_sd = 0.5 / std::sqrt(static_cast<double>(dims.feature_dim));
  for (double& x : reg.head.w) x *= head_sd;
  reg.head.b = 0.0;

  Optimizer opt(AdamConfig{config.lr, 0.9, 0.999, 1e-8});
  Vector rmse_history;
  rmse_history.reserve(config.max_iters);

  for (std::size_t iter = 0; iter < config.max_iters; ++iter) {
    const ForwardTrace trace = forward_trace(reg, inputs);
    double sse = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double e = trace.predictions[i] - labels[i];
      sse += e * e;
    }
    const double rmse = std::sqrt(sse / static_cast<double>(labels.size()));
    if (!std::isfinite(rmse)) raise(ErrorCode::kNonFinite, "pretraining diverged");
    rmse_history.push_back(rmse);
    if (rmse_history.size() > config.plateau_window) {
      const double past = rmse_history[rmse_history.size() - 1 - config.plateau_window];
      if (past - rmse < config.plateau_rel * std::max(past, 1e-300)) break;
    }

    const FullGrads grads = mse_grads(reg, trace, labels);
    Vector params = flatten_params(reg);
    opt.step(params, flatten_grads(grads));
    unflatten_params(reg, params);
  }
  return reg;
}

std::string MethodSpec::name() const {
  switch (kind) {
    case Kind::kSource: return "source";
    case Kind::kSsa: return "ssa";
    case Kind::kPsc: {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "psc(lambda=%g)", lambda);
      return buf;
    }
  }
  return "unknown";
}

double ExperimentResults::mean_r2(const std::string& method) const {
  double sum = 0.0;
  std::size_t count = 0;
  for (const CellResult& cell : cells) {
    if (cell.method == method) {
      sum += cell.metrics.r2;
      ++count;
    }
  }
  if (count == 0) raise(ErrorCode::kInvalidSpec, "no cells for method " + method);
  return sum / static_cast<double>(count);
}

ExperimentResults run_experiment(const ExperimentConfig& config, PretrainCache* cache) {
  if (config.methods.empty() || config.seeds.empty())
    raise(ErrorCode::kInvalidSpec, "experiment needs methods and seeds");

  PretrainCache local;
  if (cache == nullptr) cache = &local;

  ExperimentResults results;
  for (const std::uint64_t seed : config.seeds) {
    const SyntheticTask task =
        gen_synthetic_task(config.shift, config.dims, config.sizes, seed);

    auto it = cache->find(seed);
    if (it == cache->end()) {
      ToyRegressor reg = pretrain_regressor(task.source_inputs, task.source_labels,
                                            config.dims, config.pretrain, seed);
      SourceSpectralModel model = capture_source_stats(
          reg, task.source_inputs, config.k_select, config.adapt.hyper.eps_var);
      it = cache->emplace(seed, PretrainedSource{std::move(reg), std::move(model)})
               .first;
    }
    const PretrainedSource& source = it->second;
    const ProbeBank bank = build_probe_bank(source.model.dim_k);

    for (const MethodSpec& method : config.methods) {
      ToyRegressor reg = source.regressor;
      if (method.kind != MethodSpec::Kind::kSource) {
        AdaptConfig adapt = config.adapt;
        adapt.objective = method.kind == MethodSpec::Kind::kSsa
                              ? AdaptObjective::kSsa
                              : AdaptObjective::kPsc;
        adapt.hyper.lambda_res =
            method.kind == MethodSpec::Kind::kPsc ? method.lambda : 0.0;
        adapt_stream(reg, source.model, bank, adapt, task.target_batches);
      }

      CellResult cell;
      cell.method = method.name();
      cell.seed = seed;
      if (!task.target_batches.empty()) {
        PscHyperParams hyper = config.adapt.hyper;
        hyper.lambda_res =
            method.kind == MethodSpec::Kind::kPsc ? method.lambda : 0.0;
        const Matrix features = forward(reg, task.target_batches.back()).first;
        cell.l_psc_final = psc_loss(source.model, bank, reg.head, hyper, features).l_psc;
      }
      cell.metrics = evaluate(predict(reg, task.target_eval_inputs),
                              task.target_eval_labels);
      results.cells.push_back(std::move(cell));
    }
  }
  return results;
}

std::string results_to_csv(const ExperimentConfig& config,
                           const ExperimentResults& results) {
  std::string csv = "method,seed,r2,rmse,mae,l_psc_final\n";
  char buf[256];
  for (const CellResult& cell : results.cells) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%.17g,%.17g,%.17g,%.17g\n",
                  cell.method.c_str(),
                  static_cast<unsigned long long>(cell.seed), cell.metrics.r2,
                  cell.metrics.rmse, cell.metrics.mae, cell.l_psc_final);
    csv += buf;
  }
  for (const MethodSpec& method : config.methods) {
    const std::string name = method.name();
    double r2 = 0.0, rmse = 0.0, mae = 0.0, lp = 0.0;
    std::size_t count = 0;
    for (const CellResult& cell : results.cells) {
      if (cell.method != name) continue;
      r2 += cell.metrics.r2;
      rmse += cell.metrics.rmse;
      mae += cell.metrics.mae;
      lp += cell.l_psc_final;
      ++count;
    }
    if (count == 0) continue;
    const double inv = 1.0 / static_cast<double>(count);
    std::snprintf(buf, sizeof(buf), "%s,mean,%.17g,%.17g,%.17g,%.17g\n",
                  name.c_str(), r2 * inv, rmse * inv, mae * inv, lp * inv);
    csv += buf;
  }
  return csv;
}

namespace {

using nlohmann::json;

json shift_to_json(const ShiftSpec& spec) {
  json j;
  j["family"] = family_name(spec.family);
  j["severity"] = spec.severity;
  if (spec.family == ShiftSpec::Family::kCompound) {
    json parts = json::array();
    for (const ShiftSpec& part : spec.parts) parts.push_back(shift_to_json(part));
    j["parts"] = std::move(parts);
  }
  return j;
}

ShiftSpec shift_from_json(const json& j) {
  ShiftSpec spec;
  spec.family = family_from_name(j.at("family").get<std::string>());
  spec.severity = j.value("severity", 0.0);
  if (spec.family == ShiftSpec::Family::kCompound) {
    for (const auto& part : j.at("parts")) spec.parts.push_back(shift_from_json(part));
  }
  validate_shift(spec);
  return spec;
}

json matrix_rows(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from(const json& j) {
  if (!j.is_array() || j.empty()) raise(ErrorCode::kBadFile, "expected matrix rows");
  Matrix m(j.size(), j.at(0).size());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto& row = j.at(i);
    if (row.size() != m.cols()) raise(ErrorCode::kBadFile, "ragged matrix rows");
    for (std::size_t c = 0; c < m.cols(); ++c) m(i, c) = row.at(c).get<double>();
  }
  return m;
}

}  // namespace

std::string experiment_config_to_json(const ExperimentConfig& config) {
  json j;
  j["version"] = 1;
  j["shift"] = shift_to_json(config.shift);
  j["dims"] = {{"input_dim", config.dims.input_dim},
               {"hidden_dim", config.dims.hidden_dim},
               {"feature_dim", config.dims.feature_dim},
               {"signal_dims", config.dims.signal_dims}};
  j["sizes"] = {{"source_n", config.sizes.source_n},
                {"stream_batches", config.sizes.stream_batches},
                {"batch_size", config.sizes.batch_size},
                {"eval_n", config.sizes.eval_n}};
  json methods = json::array();
  for (const MethodSpec& m : config.methods) {
    json mj;
    switch (m.kind) {
      case MethodSpec::Kind::kSource: mj["kind"] = "source"; break;
      case MethodSpec::Kind::kSsa: mj["kind"] = "ssa"; break;
      case MethodSpec::Kind::kPsc:
        mj["kind"] = "psc";
        mj["lambda"] = m.lambda;
        break;
    }
    methods.push_back(std::move(mj));
  }
  j["methods"] = std::move(methods);
  j["seeds"] = config.seeds;
  json opt;
  if (std::holds_alternative<SgdConfig>(config.adapt.optimizer)) {
    const SgdConfig& cfg = std::get<SgdConfig>(config.adapt.optimizer);
    opt = {{"type", "sgd"}, {"lr", cfg.lr}, {"momentum", cfg.momentum}};
  } else {
    const AdamConfig& cfg = std::get<AdamConfig>(config.adapt.optimizer);
    opt = {{"type", "adam"},
           {"lr", cfg.lr},
           {"beta1", cfg.beta1},
           {"beta2", cfg.beta2},
           {"eps", cfg.eps}};
  }
  j["adapt"] = {
      {"optimizer", std::move(opt)},
      {"steps_per_batch", config.adapt.steps_per_batch},
      {"mode", config.adapt.mode == AdaptMode::kOnline ? "online" : "episodic"},
      {"hyper",
       {{"c", config.adapt.hyper.c},
        {"gamma", config.adapt.hyper.gamma},
        {"eps_var", config.adapt.hyper.eps_var}}}};
  j["pretrain"] = {{"lr", config.pretrain.lr},
                   {"max_iters", config.pretrain.max_iters},
                   {"plateau_window", config.pretrain.plateau_window},
                   {"plateau_rel", config.pretrain.plateau_rel}};
  if (config.k_select.mode == KSelection::Mode::kFixed) {
    j["k_selection"] = {{"mode", "fixed"}, {"k", config.k_select.k}};
  } else {
    j["k_selection"] = {{"mode", "explained_variance"}, {"rho", config.k_select.rho}};
  }
  return j.dump(2);
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("config JSON parse failure: ") + e.what());
  }
  try {
    if (j.value("version", 1) != 1)
      raise(ErrorCode::kBadFile, "unknown config version");
    ExperimentConfig config;
    if (j.contains("shift")) config.shift = shift_from_json(j.at("shift"));
    if (j.contains("dims")) {
      const auto& d = j.at("dims");
      config.dims.input_dim = d.value("input_dim", config.dims.input_dim);
      config.dims.hidden_dim = d.value("hidden_dim", config.dims.hidden_dim);
      config.dims.feature_dim = d.value("feature_dim", config.dims.feature_dim);
      config.dims.signal_dims = d.value("signal_dims", config.dims.signal_dims);
    }
    if (j.contains("sizes")) {
      const auto& s = j.at("sizes");
      config.sizes.source_n = s.value("source_n", config.sizes.source_n);
      config.sizes.stream_batches = s.value("stream_batches", config.sizes.stream_batches);
      config.sizes.batch_size = s.value("batch_size", config.sizes.batch_size);
      config.sizes.eval_n = s.value("eval_n", config.sizes.eval_n);
    }
    for (const auto& mj : j.at("methods")) {
      MethodSpec m;
      const std::string kind = mj.at("kind").get<std::string>();
      if (kind == "source") {
        m.kind = MethodSpec::Kind::kSource;
      } else if (kind == "ssa") {
        m.kind = MethodSpec::Kind::kSsa;
      } else if (kind == "psc") {
        m.kind = MethodSpec::Kind::kPsc;
        m.lambda = mj.value("lambda", 0.0);
      } else {
        raise(ErrorCode::kInvalidSpec, "unknown method kind: " + kind);
      }
      config.methods.push_back(m);
    }
    config.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("adapt")) {
      const auto& a = j.at("adapt");
      if (a.contains("optimizer")) {
        const auto& o = a.at("optimizer");
        const std::string type = o.value("type", "adam");
        if (type == "sgd") {
          SgdConfig cfg;
          cfg.lr = o.value("lr", cfg.lr);
          cfg.momentum = o.value("momentum", cfg.momentum);
          config.adapt.optimizer = cfg;
        } else if (type == "adam") {
          AdamConfig cfg;
          cfg.lr = o.value("lr", cfg.lr);
          cfg.beta1 = o.value("beta1", cfg.beta1);
          cfg.beta2 = o.value("beta2", cfg.beta2);
          cfg.eps = o.value("eps", cfg.eps);
          config.adapt.optimizer = cfg;
        } else {
          raise(ErrorCode::kInvalidSpec, "unknown optimizer type: " + type);
        }
      }
      config.adapt.steps_per_batch = a.value("steps_per_batch", config.adapt.steps_per_batch);
      const std::string mode = a.value("mode", "online");
      if (mode == "online") {
        config.adapt.mode = AdaptMode::kOnline;
      } else if (mode == "episodic") {
        config.adapt.mode = AdaptMode::kEpisodic;
      } else {
        raise(ErrorCode::kInvalidSpec, "unknown adaptation mode: " + mode);
      }
      if (a.contains("hyper")) {
        const auto& h = a.at("hyper");
        config.adapt.hyper.c = h.value("c", config.adapt.hyper.c);
        config.adapt.hyper.gamma = h.value("gamma", config.adapt.hyper.gamma);
        config.adapt.hyper.eps_var = h.value("eps_var", config.adapt.hyper.eps_var);
      }
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      config.pretrain.lr = p.value("lr", config.pretrain.lr);
      config.pretrain.max_iters = p.value("max_iters", config.pretrain.max_iters);
      config.pretrain.plateau_window = p.value("plateau_window", config.pretrain.plateau_window);
      config.pretrain.plateau_rel = p.value("plateau_rel", config.pretrain.plateau_rel);
    }
    if (j.contains("k_selection")) {
      const auto& k = j.at("k_selection");
      const std::string mode = k.value("mode", "explained_variance");
      if (mode == "fixed") {
        config.k_select = KSelection::fixed(k.at("k").get<std::size_t>());
      } else if (mode == "explained_variance") {
        config.k_select = KSelection::explained_variance(k.value("rho", 0.99));
      } else {
        raise(ErrorCode::kInvalidSpec, "unknown k_selection mode: " + mode);
      }
    }
    return config;
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("config JSON field failure: ") + e.what());
  }
}

void save_task(const SyntheticTask& task, const std::string& path) {
  json j;
  j["version"] = 1;
  j["source_inputs"] = matrix_rows(task.source_inputs);
  j["source_labels"] = task.source_labels;
  json batches = json::array();
  for (const Matrix& batch : task.target_batches) batches.push_back(matrix_rows(batch));
  j["target_batches"] = std::move(batches);
  j["target_eval_inputs"] = matrix_rows(task.target_eval_inputs);
  j["target_eval_labels"] = task.target_eval_labels;
  j["label_noise_sd"] = task.label_noise_sd;
  std::ofstream out(path);
  if (!out) raise(ErrorCode::kIoError, "cannot open for writing: " + path);
  out << j.dump() << '\n';
  if (!out) raise(ErrorCode::kIoError, "write failure: " + path);
}

SyntheticTask load_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::kIoError, "cannot open for reading: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("task JSON parse failure: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != 1)
      raise(ErrorCode::kBadFile, "unknown task file version");
    SyntheticTask task;
    task.source_inputs = matrix_from(j.at("source_inputs"));
    task.source_labels = j.at("source_labels").get<Vector>();
    for (const auto& batch : j.at("target_batches"))
      task.target_batches.push_back(matrix_from(batch));
    task.target_eval_inputs = matrix_from(j.at("target_eval_inputs"));
    task.target_eval_labels = j.at("target_eval_labels").get<Vector>();
    task.label_noise_sd = j.value("label_noise_sd", 0.0);
    return task;
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("task JSON field failure: ") + e.what());
  }
}

}  // namespace psc
