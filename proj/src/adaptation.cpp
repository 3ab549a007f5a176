#include "psc/adaptation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "psc/errors.hpp"

namespace psc {

namespace {

void validate_regressor(const ToyRegressor& reg) {
  if (reg.blocks.empty()) raise(ErrorCode::kInvalidSpec, "regressor needs at least one block");
  std::size_t dim = reg.blocks.front().weight.cols();
  for (const RegressorBlock& blk : reg.blocks) {
    const std::size_t out = blk.weight.rows();
    if (blk.weight.cols() != dim || blk.bias.size() != out ||
        blk.norm_mean.size() != out || blk.norm_var.size() != out ||
        blk.affine_scale.size() != out || blk.affine_shift.size() != out)
      raise(ErrorCode::kDimMismatch, "inconsistent block dimensions");
    for (double v : blk.norm_var)
      if (!(v > 0.0)) raise(ErrorCode::kInvalidSpec, "norm_var entries must be positive");
    dim = out;
  }
  if (reg.head.w.size() != dim)
    raise(ErrorCode::kDimMismatch, "head dimension does not match final block");
}

Matrix block_preactivation(const RegressorBlock& blk, const Matrix& x) {
  Matrix h = matmul_bt(x, blk.weight);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double* row = h.row(i);
    for (std::size_t j = 0; j < h.cols(); ++j) row[j] += blk.bias[j];
  }
  return h;
}

}  // namespace

std::size_t ToyRegressor::input_dim() const {
  return blocks.empty() ? 0 : blocks.front().weight.cols();
}

std::size_t ToyRegressor::feature_dim() const {
  return blocks.empty() ? 0 : blocks.back().weight.rows();
}

ForwardTrace forward_trace(const ToyRegressor& reg, const Matrix& inputs) {
  validate_regressor(reg);
  if (inputs.cols() != reg.input_dim())
    raise(ErrorCode::kDimMismatch, "input dimension does not match first block");
  if (!all_finite(inputs)) raise(ErrorCode::kNonFinite, "non-finite inputs");

  ForwardTrace trace;
  trace.inputs.push_back(inputs);
  for (const RegressorBlock& blk : reg.blocks) {
    const Matrix& x = trace.inputs.back();
    Matrix h = block_preactivation(blk, x);
    if (!all_finite(h)) raise(ErrorCode::kNonFinite, "non-finite pre-activation");

    const std::size_t out = blk.weight.rows();
    Vector inv_sd(out);
    for (std::size_t j = 0; j < out; ++j) inv_sd[j] = 1.0 / std::sqrt(blk.norm_var[j]);

    Matrix n(h.rows(), out);
    Matrix y(h.rows(), out);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      const double* hr = h.row(i);
      double* nr = n.row(i);
      double* yr = y.row(i);
      for (std::size_t j = 0; j < out; ++j) {
        nr[j] = (hr[j] - blk.norm_mean[j]) * inv_sd[j];
        yr[j] = std::tanh(blk.affine_scale[j] * nr[j] + blk.affine_shift[j]);
      }
    }
    trace.normalized.push_back(std::move(n));
    trace.outputs.push_back(y);
    trace.inputs.push_back(std::move(y));
  }
  trace.inputs.pop_back();

  const Matrix& features = trace.outputs.back();
  trace.predictions.resize(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    double acc = reg.head.b;
    const double* zi = features.row(i);
    for (std::size_t j = 0; j < features.cols(); ++j) acc += reg.head.w[j] * zi[j];
    trace.predictions[i] = acc;
  }
  if (!all_finite(trace.predictions)) raise(ErrorCode::kNonFinite, "non-finite predictions");
  return trace;
}

std::pair<Matrix, Vector> forward(const ToyRegressor& reg, const Matrix& inputs) {
  ForwardTrace trace = forward_trace(reg, inputs);
  return {std::move(trace.outputs.back()), std::move(trace.predictions)};
}

Vector predict(const ToyRegressor& reg, const Matrix& inputs) {
  return forward_trace(reg, inputs).predictions;
}

SourceSpectralModel capture_source_stats(ToyRegressor& reg, const Matrix& source_inputs,
                                         const KSelection& select, double eps_var) {
  validate_regressor(reg);
  if (source_inputs.cols() != reg.input_dim())
    raise(ErrorCode::kDimMismatch, "input dimension does not match first block");
  if (source_inputs.rows() < 2)
    raise(ErrorCode::kTooFewSamples, "capture needs at least two samples");
  if (!all_finite(source_inputs)) raise(ErrorCode::kNonFinite, "non-finite inputs");

  Matrix x = source_inputs;
  for (RegressorBlock& blk : reg.blocks) {
    Matrix h = block_preactivation(blk, x);
    if (!all_finite(h)) raise(ErrorCode::kNonFinite, "non-finite pre-activation");
    const Vector mean_new = column_means(h);
    Vector var_new = column_vars(h);
    for (double& v : var_new) v = std::max(v, eps_var);

    // Swap in the new statistics while folding the change into the affine
    // parameters, so the network function is preserved exactly.
    const std::size_t out = blk.weight.rows();
    for (std::size_t j = 0; j < out; ++j) {
      const double sd_old = std::sqrt(blk.norm_var[j]);
      const double sd_new = std::sqrt(var_new[j]);
      const double scale_old = blk.affine_scale[j];
      // Ratio first: a repeated capture sees sd_new == sd_old and must leave
      // the parameters bit-identical.
      blk.affine_scale[j] = scale_old * (sd_new / sd_old);
      blk.affine_shift[j] += scale_old * (mean_new[j] - blk.norm_mean[j]) / sd_old;
      blk.norm_mean[j] = mean_new[j];
      blk.norm_var[j] = var_new[j];
    }

    Matrix y(h.rows(), out);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      const double* hr = h.row(i);
      double* yr = y.row(i);
      for (std::size_t j = 0; j < out; ++j) {
        const double n = (hr[j] - blk.norm_mean[j]) / std::sqrt(blk.norm_var[j]);
        yr[j] = std::tanh(blk.affine_scale[j] * n + blk.affine_shift[j]);
      }
    }
    x = std::move(y);
  }
  return fit_source_model(x, select, eps_var);
}

double AffineGrads::norm_sq_total() const {
  double acc = 0.0;
  for (const Vector& g : scale) acc += norm_sq(g);
  for (const Vector& g : shift) acc += norm_sq(g);
  return acc;
}

bool AffineGrads::finite() const {
  for (const Vector& g : scale)
    if (!all_finite(g)) return false;
  for (const Vector& g : shift)
    if (!all_finite(g)) return false;
  return true;
}

AffineGrads backprop_to_affine(const ToyRegressor& reg, const Matrix& inputs,
                               const Matrix& feature_grad) {
  const ForwardTrace trace = forward_trace(reg, inputs);
  if (feature_grad.rows() != inputs.rows() ||
      feature_grad.cols() != reg.feature_dim())
    raise(ErrorCode::kDimMismatch, "feature gradient shape mismatch");

  const std::size_t nblocks = reg.blocks.size();
  AffineGrads grads;
  grads.scale.resize(nblocks);
  grads.shift.resize(nblocks);

  Matrix dy = feature_grad;
  for (std::size_t l = nblocks; l-- > 0;) {
    const RegressorBlock& blk = reg.blocks[l];
    const Matrix& y = trace.outputs[l];
    const Matrix& n = trace.normalized[l];
    const std::size_t out = blk.weight.rows();
    const std::size_t b = dy.rows();

    grads.scale[l].assign(out, 0.0);
    grads.shift[l].assign(out, 0.0);

    Matrix dh(b, out);
    for (std::size_t i = 0; i < b; ++i) {
      const double* yr = y.row(i);
      const double* nr = n.row(i);
      const double* dyr = dy.row(i);
      double* dhr = dh.row(i);
      for (std::size_t j = 0; j < out; ++j) {
        const double da = dyr[j] * (1.0 - yr[j] * yr[j]);  // through tanh
        grads.scale[l][j] += da * nr[j];
        grads.shift[l][j] += da;
        dhr[j] = da * blk.affine_scale[j] / std::sqrt(blk.norm_var[j]);
      }
    }
    if (l > 0) dy = matmul(dh, blk.weight);
  }
  return grads;
}

void Optimizer::step(Vector& params, const Vector& grads) {
  if (params.size() != grads.size())
    raise(ErrorCode::kDimMismatch, "optimizer parameter/gradient size mismatch");
  if (std::holds_alternative<SgdConfig>(config_)) {
    const SgdConfig& cfg = std::get<SgdConfig>(config_);
    if (cfg.momentum != 0.0) {
      if (m_.size() != params.size()) m_.assign(params.size(), 0.0);
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = cfg.momentum * m_[i] + grads[i];
        params[i] -= cfg.lr * m_[i];
      }
    } else {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.lr * grads[i];
    }
  } else {
    const AdamConfig& cfg = std::get<AdamConfig>(config_);
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg.beta1 * m_[i] + (1.0 - cfg.beta1) * grads[i];
      v_[i] = cfg.beta2 * v_[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void Optimizer::reset() {
  m_.clear();
  v_.clear();
  t_ = 0;
}

namespace {

Vector gather_affine(const ToyRegressor& reg) {
  Vector params;
  for (const RegressorBlock& blk : reg.blocks) {
    params.insert(params.end(), blk.affine_scale.begin(), blk.affine_scale.end());
    params.insert(params.end(), blk.affine_shift.begin(), blk.affine_shift.end());
  }
  return params;
}

void scatter_affine(ToyRegressor& reg, const Vector& params) {
  std::size_t pos = 0;
  for (RegressorBlock& blk : reg.blocks) {
    for (double& x : blk.affine_scale) x = params[pos++];
    for (double& x : blk.affine_shift) x = params[pos++];
  }
}

Vector gather_grads(const AffineGrads& grads) {
  Vector flat;
  for (std::size_t l = 0; l < grads.scale.size(); ++l) {
    flat.insert(flat.end(), grads.scale[l].begin(), grads.scale[l].end());
    flat.insert(flat.end(), grads.shift[l].begin(), grads.shift[l].end());
  }
  return flat;
}

void validate_config(const AdaptConfig& config) {
  if (config.steps_per_batch < 1)
    raise(ErrorCode::kInvalidSpec, "steps_per_batch must be >= 1");
  const double lr = std::holds_alternative<SgdConfig>(config.optimizer)
                        ? std::get<SgdConfig>(config.optimizer).lr
                        : std::get<AdamConfig>(config.optimizer).lr;
  if (lr < 0.0) raise(ErrorCode::kInvalidSpec, "learning rate must be >= 0");
}

LossReport nan_report() {
  LossReport r;
  r.l_sup = r.l_res = r.l_psc = std::numeric_limits<double>::quiet_NaN();
  return r;
}

// Single-batch adaptation step shared by adapt_batch and adapt_stream.
BatchResult process_batch(ToyRegressor& reg, const SourceSpectralModel& model,
                          const ProbeBank& bank, const AdaptConfig& config,
                          Optimizer& opt, const Matrix& batch) {
  if (batch.rows() < 2) raise(ErrorCode::kTooFewSamples, "adaptation needs B >= 2");

  BatchResult result;
  const Vector before = gather_affine(reg);
  bool entry_done = false;
  try {
    {
      const ForwardTrace trace = forward_trace(reg, batch);
      const double b = static_cast<double>(trace.predictions.size());
      double mean = 0.0;
      for (double p : trace.predictions) mean += p;
      mean /= b;
      double var = 0.0;
      for (double p : trace.predictions) var += (p - mean) * (p - mean);
      result.pred_mean = mean;
      result.pred_var = var / b;

      if (config.objective == AdaptObjective::kPsc) {
        result.report = psc_loss(model, bank, reg.head, config.hyper, trace.features());
      } else {
        const double value = ssa_loss(model, reg.head, trace.features());
        result.report = LossReport{};
        result.report.l_sup = value;
        result.report.l_psc = value;
      }
      entry_done = true;
    }

    for (std::size_t step = 0; step < config.steps_per_batch; ++step) {
      const ForwardTrace trace = forward_trace(reg, batch);
      const FeatureGrad fgrad =
          config.objective == AdaptObjective::kPsc
              ? psc_loss_grad(model, bank, reg.head, config.hyper, trace.features())
              : ssa_loss_grad(model, reg.head, trace.features());
      if (!all_finite(fgrad.grad)) {
        result.skipped = true;
        break;
      }
      const AffineGrads agrads = backprop_to_affine(reg, batch, fgrad.grad);
      if (!agrads.finite()) {
        result.skipped = true;
        break;
      }
      Vector params = gather_affine(reg);
      opt.step(params, gather_grads(agrads));
      if (!all_finite(params)) {
        result.skipped = true;
        break;
      }
      scatter_affine(reg, params);
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kNonFinite) throw;
    result.skipped = true;
    if (!entry_done) result.report = nan_report();
  }

  if (result.skipped) {
    scatter_affine(reg, before);  // abandoned update
    result.update_norm = 0.0;
  } else {
    const Vector after = gather_affine(reg);
    double acc = 0.0;
    for (std::size_t i = 0; i < after.size(); ++i) {
      const double d = after[i] - before[i];
      acc += d * d;
    }
    result.update_norm = std::sqrt(acc);
  }
  return result;
}

}  // namespace

BatchResult adapt_batch(ToyRegressor& reg, const SourceSpectralModel& model,
                        const ProbeBank& bank, const AdaptConfig& config,
                        const Matrix& batch) {
  validate_config(config);
  Optimizer opt(config.optimizer);
  return process_batch(reg, model, bank, config, opt, batch);
}

AdaptTrace adapt_stream(ToyRegressor& reg, const SourceSpectralModel& model,
                        const ProbeBank& bank, const AdaptConfig& config,
                        std::span<const Matrix> batches) {
  validate_config(config);
  AdaptTrace trace;
  Optimizer opt(config.optimizer);
  const ToyRegressor initial = reg;
  for (const Matrix& batch : batches) {
    if (config.mode == AdaptMode::kEpisodic) {
      reg = initial;
      opt.reset();
    }
    const BatchResult result = process_batch(reg, model, bank, config, opt, batch);
    trace.reports.push_back(result.report);
    trace.update_norms.push_back(result.update_norm);
    trace.skipped.push_back(result.skipped ? 1 : 0);
    trace.pred_mean.push_back(result.pred_mean);
    trace.pred_var.push_back(result.pred_var);
  }
  return trace;
}

namespace {

using nlohmann::json;

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

std::string regressor_to_json(const ToyRegressor& reg) {
  json j;
  j["version"] = 1;
  j["eps_var"] = reg.eps_var;
  json blocks = json::array();
  for (const RegressorBlock& blk : reg.blocks) {
    json b;
    b["weight"] = matrix_rows(blk.weight);
    b["bias"] = blk.bias;
    b["norm_mean"] = blk.norm_mean;
    b["norm_var"] = blk.norm_var;
    b["affine_scale"] = blk.affine_scale;
    b["affine_shift"] = blk.affine_shift;
    blocks.push_back(std::move(b));
  }
  j["blocks"] = std::move(blocks);
  j["head"] = {{"w", reg.head.w}, {"b", reg.head.b}};
  return j.dump(2);
}

ToyRegressor regressor_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("regressor JSON parse failure: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != 1)
      raise(ErrorCode::kBadFile, "unknown regressor file version");
    ToyRegressor reg;
    reg.eps_var = j.at("eps_var").get<double>();
    for (const auto& b : j.at("blocks")) {
      RegressorBlock blk;
      blk.weight = matrix_from(b.at("weight"));
      blk.bias = b.at("bias").get<Vector>();
      blk.norm_mean = b.at("norm_mean").get<Vector>();
      blk.norm_var = b.at("norm_var").get<Vector>();
      blk.affine_scale = b.at("affine_scale").get<Vector>();
      blk.affine_shift = b.at("affine_shift").get<Vector>();
      reg.blocks.push_back(std::move(blk));
    }
    reg.head.w = j.at("head").at("w").get<Vector>();
    reg.head.b = j.at("head").at("b").get<double>();
    validate_regressor(reg);
    return reg;
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, std::string("regressor JSON field failure: ") + e.what());
  }
}

void save_regressor(const ToyRegressor& reg, const std::string& path) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::kIoError, "cannot open for writing: " + path);
  out << regressor_to_json(reg) << '\n';
  if (!out) raise(ErrorCode::kIoError, "write failure: " + path);
}

ToyRegressor load_regressor(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::kIoError, "cannot open for reading: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return regressor_from_json(buf.str());
}

void write_trace_csv(const AdaptTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::kIoError, "cannot open for writing: " + path);
  out << "index,l_sup,l_res,l_psc,update_norm\n";
  char buf[128];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const LossReport& r = trace.reports[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", i, r.l_sup,
                  r.l_res, r.l_psc, trace.update_norms[i]);
    out << buf;
  }
  if (!out) raise(ErrorCode::kIoError, "write failure: " + path);
}

void write_trace_json(const AdaptTrace& trace, const std::string& path) {
  json batches = json::array();
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const LossReport& r = trace.reports[i];
    json b;
    b["index"] = i;
    b["l_sup"] = r.l_sup;
    b["l_res"] = r.l_res;
    b["l_psc"] = r.l_psc;
    b["update_norm"] = trace.update_norms[i];
    b["skipped"] = static_cast<bool>(trace.skipped[i]);
    b["pred_mean"] = trace.pred_mean[i];
    b["pred_var"] = trace.pred_var[i];
    batches.push_back(std::move(b));
  }
  json j;
  j["version"] = 1;
  j["batches"] = std::move(batches);
  std::ofstream out(path);
  if (!out) raise(ErrorCode::kIoError, "cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) raise(ErrorCode::kIoError, "write failure: " + path);
}

}  // namespace psc
