#include "psc/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "psc/adaptation.hpp"
#include "psc/bench.hpp"
#include "psc/errors.hpp"
#include "psc/theory.hpp"

namespace psc {

namespace {

using nlohmann::json;

std::string resolve_output(const std::string& path) {
  const char* dir = std::getenv("PSC_OUT_DIR");
  if (dir == nullptr || *dir == '\0') return path;
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(dir) / p).string();
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::kIoError, "cannot open for reading: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::exception& e) {
    raise(ErrorCode::kBadFile, path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  const std::string resolved = resolve_output(path);
  std::ofstream out(resolved);
  if (!out) raise(ErrorCode::kIoError, "cannot open for writing: " + resolved);
  out << text;
  if (!out) raise(ErrorCode::kIoError, "write failure: " + resolved);
}

Matrix features_from_file(const std::string& path) {
  const json j = read_json_file(path);
  const json* rows = nullptr;
  if (j.is_object() && j.contains("features")) {
    rows = &j.at("features");
  } else if (j.is_array()) {
    rows = &j;
  } else {
    raise(ErrorCode::kBadFile, path + ": expected {\"features\": [[...]]} or a bare 2-D array");
  }
  if (!rows->is_array() || rows->empty())
    raise(ErrorCode::kBadFile, path + ": empty feature matrix");
  Matrix m(rows->size(), rows->at(0).size());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto& row = rows->at(i);
    if (row.size() != m.cols()) raise(ErrorCode::kBadFile, path + ": ragged rows");
    for (std::size_t c = 0; c < m.cols(); ++c) m(i, c) = row.at(c).get<double>();
  }
  return m;
}

Vector vector_from_file(const std::string& path, const char* key) {
  const json j = read_json_file(path);
  if (j.is_array()) return j.get<Vector>();
  if (j.is_object() && j.contains(key)) return j.at(key).get<Vector>();
  raise(ErrorCode::kBadFile,
        path + ": expected a JSON array or {\"" + std::string(key) + "\": [...]}");
}

int run_fit_source(const std::string& in_path, const std::string& out_path,
                   double rho, long long fixed_k, double eps_var) {
  const Matrix features = features_from_file(in_path);
  const KSelection select = fixed_k > 0
                                ? KSelection::fixed(static_cast<std::size_t>(fixed_k))
                                : KSelection::explained_variance(rho);
  const SourceSpectralModel model = fit_source_model(features, select, eps_var);
  write_text_file(out_path, source_model_to_json(model) + "\n");
  std::cout << "wrote model (d=" << model.dim_d << ", k=" << model.dim_k
            << ", tau=" << model.tau << ") to " << resolve_output(out_path) << "\n";
  return 0;
}

ShiftSpec shift_from_flags(const std::string& family, double severity) {
  ShiftSpec spec;
  spec.family = family_from_name(family);
  spec.severity = severity;
  if (spec.family == ShiftSpec::Family::kCompound)
    raise(ErrorCode::kInvalidSpec,
          "compound shifts are only available through JSON configs");
  return spec;
}

json identifiability_to_json(const IdentifiabilityReport& rep) {
  return json{{"k", rep.k},
              {"trials", rep.trials},
              {"passes", rep.passes},
              {"worst_error", rep.worst_error},
              {"tol", rep.tol},
              {"pass", rep.pass()}};
}

int run_verify_theory(std::size_t k_max, std::size_t trials, std::uint64_t seed,
                      double tol, const std::string& out_path) {
  bool all_pass = true;

  json ident = json::array();
  double ident_worst = 0.0;
  for (std::size_t k = 1; k <= k_max; ++k) {
    const IdentifiabilityReport rep =
        verify_identifiability(k, trials, tol, Rng::derive(seed, 100 + k));
    ident.push_back(identifiability_to_json(rep));
    ident_worst = std::max(ident_worst, rep.worst_error);
    all_pass = all_pass && rep.pass();
  }

  Rng rng(Rng::derive(seed, 7));
  std::size_t violations = 0;
  double min_slack_tight = std::numeric_limits<double>::infinity();
  double min_slack_loose = std::numeric_limits<double>::infinity();
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t d = 3 + static_cast<std::size_t>(rng.uniform(0.0, 6.0));
    const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(d - 1)));
    SourceSpectralModel model;
    model.dim_d = d;
    model.dim_k = k;
    model.eps_var = kDefaultEpsVar;
    model.mu_s.assign(d, 0.0);
    const Matrix q = orthonormal_columns(rng.normal_matrix(d, d));
    model.basis_v = Matrix(k, d);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < d; ++c) model.basis_v(r, c) = q(c, r);
    model.lambdas.resize(k);
    for (double& lam : model.lambdas) lam = rng.uniform(0.2, 5.0);
    std::sort(model.lambdas.begin(), model.lambdas.end(), std::greater<double>());
    model.tau = rng.uniform(0.05, 2.0);

    BlockTargetSpec target;
    target.mu_t = rng.normal_vector(k);
    target.sigma_t = random_spd(k, rng);
    target.nu_t = rng.uniform(0.05, 3.0);
    Vector raw = rng.normal_vector(d);
    const Vector in_support = mat_vec(model.basis_v, raw);
    const Vector back = vec_mat(in_support, model.basis_v);
    for (std::size_t i = 0; i < d; ++i) raw[i] -= back[i];
    target.mu_perp_norm_sq = norm_sq(raw);

    RegressorHead head;
    head.w = rng.normal_vector(d);
    head.b = rng.normal();

    try {
      const DriftReport rep = check_drift_bound(head, model, target, raw);
      min_slack_tight = std::min(min_slack_tight, rep.slack_tight);
      min_slack_loose = std::min(min_slack_loose, rep.slack_loose);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kBoundViolated) throw;
      ++violations;
    }
  }
  all_pass = all_pass && violations == 0;

  json report;
  report["identifiability"] = {{"per_k", std::move(ident)},
                               {"worst_error", ident_worst},
                               {"pass", all_pass}};
  report["drift_bound"] = {{"instances", trials},
                           {"violations", violations},
                           {"min_slack_tight", min_slack_tight},
                           {"min_slack_loose", min_slack_loose},
                           {"pass", violations == 0}};
  report["pass"] = all_pass;

  const std::string text = report.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text_file(out_path, text);
    std::cout << (all_pass ? "PASS" : "FAIL") << " -> " << resolve_output(out_path)
              << "\n";
  }
  return all_pass ? 0 : 1;
}

int run_adapt(const std::string& task_path, const std::string& checkpoint_path,
              const std::string& model_path, double lambda,
              const std::string& optimizer, double lr, double momentum,
              std::size_t steps, const std::string& mode,
              const std::string& objective, const std::string& trace_csv,
              const std::string& trace_json, const std::string& checkpoint_out,
              double rho) {
  const SyntheticTask task = load_task(task_path);

  ToyRegressor reg;
  SourceSpectralModel model;
  if (checkpoint_path.empty()) {
    // Bootstrap from the task itself: pretrain on its labeled source data.
    TaskDims dims;
    dims.input_dim = task.source_inputs.cols();
    reg = pretrain_regressor(task.source_inputs, task.source_labels, dims,
                             PretrainConfig{}, 0);
    model = capture_source_stats(reg, task.source_inputs,
                                 KSelection::explained_variance(rho));
  } else {
    reg = load_regressor(checkpoint_path);
    if (model_path.empty())
      raise(ErrorCode::kInvalidSpec, "--model is required with --checkpoint");
    model = load_source_model(model_path);
  }

  AdaptConfig config;
  if (optimizer == "sgd") {
    config.optimizer = SgdConfig{lr, momentum};
  } else if (optimizer == "adam") {
    config.optimizer = AdamConfig{lr, 0.9, 0.999, 1e-8};
  } else {
    raise(ErrorCode::kInvalidSpec, "unknown optimizer: " + optimizer);
  }
  config.steps_per_batch = steps;
  if (mode == "online") {
    config.mode = AdaptMode::kOnline;
  } else if (mode == "episodic") {
    config.mode = AdaptMode::kEpisodic;
  } else {
    raise(ErrorCode::kInvalidSpec, "unknown mode: " + mode);
  }
  if (objective == "psc") {
    config.objective = AdaptObjective::kPsc;
  } else if (objective == "ssa") {
    config.objective = AdaptObjective::kSsa;
  } else {
    raise(ErrorCode::kInvalidSpec, "unknown objective: " + objective);
  }
  config.hyper.lambda_res = lambda;

  const ProbeBank bank = build_probe_bank(model.dim_k);
  const AdaptTrace trace =
      adapt_stream(reg, model, bank, config, task.target_batches);

  if (!trace_csv.empty()) write_trace_csv(trace, resolve_output(trace_csv));
  if (!trace_json.empty()) write_trace_json(trace, resolve_output(trace_json));
  if (!checkpoint_out.empty()) save_regressor(reg, resolve_output(checkpoint_out));

  if (!task.target_eval_labels.empty()) {
    const MetricsReport metrics =
        evaluate(predict(reg, task.target_eval_inputs), task.target_eval_labels);
    json summary = {{"batches", trace.size()},
                    {"r2", metrics.r2},
                    {"rmse", metrics.rmse},
                    {"mae", metrics.mae}};
    if (!trace.reports.empty())
      summary["l_psc_final"] = trace.reports.back().l_psc;
    std::cout << summary.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Predictive spectral calibration toolkit"};
  app.require_subcommand(1);

  // fit-source
  auto* fit = app.add_subcommand("fit-source", "Fit a spectral source model from features");
  std::string fit_in, fit_out;
  double fit_rho = 0.99;
  long long fit_k = 0;
  double fit_eps = kDefaultEpsVar;
  fit->add_option("--in", fit_in, "Input feature JSON")->required();
  fit->add_option("--out", fit_out, "Output model JSON")->required();
  fit->add_option("--rho", fit_rho, "Explained-variance fraction");
  fit->add_option("--k", fit_k, "Fixed support dimension (overrides --rho)");
  fit->add_option("--eps-var", fit_eps, "Variance clamp floor");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shifted task");
  std::string gen_family = "mean_drift", gen_out;
  double gen_severity = 0.0;
  std::uint64_t gen_seed = 0;
  TaskDims gen_dims;
  TaskSizes gen_sizes;
  gen->add_option("--family", gen_family, "Shift family");
  gen->add_option("--severity", gen_severity, "Shift severity (0 = identity)");
  gen->add_option("--seed", gen_seed, "Seed");
  gen->add_option("--out", gen_out, "Output task JSON")->required();
  gen->add_option("--input-dim", gen_dims.input_dim);
  gen->add_option("--hidden-dim", gen_dims.hidden_dim);
  gen->add_option("--feature-dim", gen_dims.feature_dim);
  gen->add_option("--signal-dims", gen_dims.signal_dims);
  gen->add_option("--source-n", gen_sizes.source_n);
  gen->add_option("--stream-batches", gen_sizes.stream_batches);
  gen->add_option("--batch-size", gen_sizes.batch_size);
  gen->add_option("--eval-n", gen_sizes.eval_n);

  // adapt
  auto* adapt = app.add_subcommand("adapt", "Adapt a regressor on a task's target stream");
  std::string adapt_task, adapt_ckpt, adapt_model, adapt_opt = "sgd";
  std::string adapt_mode = "online", adapt_obj = "psc";
  std::string adapt_trace_csv, adapt_trace_json, adapt_ckpt_out;
  double adapt_lambda = 0.0, adapt_lr = 1e-3, adapt_momentum = 0.0, adapt_rho = 0.99;
  std::size_t adapt_steps = 1;
  adapt->add_option("--task", adapt_task, "Task JSON")->required();
  adapt->add_option("--checkpoint", adapt_ckpt, "Regressor checkpoint JSON (pretrains from the task when omitted)");
  adapt->add_option("--model", adapt_model, "Source model JSON (required with --checkpoint)");
  adapt->add_option("--lambda", adapt_lambda, "Residual-term weight");
  adapt->add_option("--optimizer", adapt_opt, "sgd or adam");
  adapt->add_option("--lr", adapt_lr, "Learning rate");
  adapt->add_option("--momentum", adapt_momentum, "SGD momentum");
  adapt->add_option("--steps", adapt_steps, "Updates per batch");
  adapt->add_option("--mode", adapt_mode, "online or episodic");
  adapt->add_option("--objective", adapt_obj, "psc or ssa");
  adapt->add_option("--rho", adapt_rho, "Explained-variance fraction when pretraining");
  adapt->add_option("--trace-csv", adapt_trace_csv, "Per-batch trace CSV output");
  adapt->add_option("--trace-json", adapt_trace_json, "Per-batch trace JSON output");
  adapt->add_option("--checkpoint-out", adapt_ckpt_out, "Adapted checkpoint output");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Compute regression metrics");
  std::string eval_pred, eval_labels;
  eval->add_option("--predictions", eval_pred, "Predictions JSON array")->required();
  eval->add_option("--labels", eval_labels, "Labels JSON array")->required();

  // run
  auto* run = app.add_subcommand("run", "Run a full experiment from a config");
  std::string run_config, run_out;
  run->add_option("--config", run_config, "Experiment config JSON")->required();
  run->add_option("--out", run_out, "Results CSV output")->required();

  // verify-theory
  auto* verify = app.add_subcommand("verify-theory", "Numerically check the identifiability and drift-bound guarantees");
  std::size_t verify_k = 4, verify_trials = 1000;
  std::uint64_t verify_seed = 7;
  double verify_tol = 1e-10;
  std::string verify_out;
  verify->add_option("--k", verify_k, "Check support dimensions 1..k");
  verify->add_option("--trials", verify_trials, "Trials per check");
  verify->add_option("--seed", verify_seed, "Seed");
  verify->add_option("--tol", verify_tol, "Recovery tolerance");
  verify->add_option("--out", verify_out, "Report JSON output (stdout when omitted)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (fit->parsed())
      return run_fit_source(fit_in, fit_out, fit_rho, fit_k, fit_eps);
    if (gen->parsed()) {
      const SyntheticTask task = gen_synthetic_task(
          shift_from_flags(gen_family, gen_severity), gen_dims, gen_sizes, gen_seed);
      save_task(task, resolve_output(gen_out));
      std::cout << "wrote task (" << task.target_batches.size() << " target batches) to "
                << resolve_output(gen_out) << "\n";
      return 0;
    }
    if (adapt->parsed())
      return run_adapt(adapt_task, adapt_ckpt, adapt_model, adapt_lambda, adapt_opt,
                       adapt_lr, adapt_momentum, adapt_steps, adapt_mode, adapt_obj,
                       adapt_trace_csv, adapt_trace_json, adapt_ckpt_out, adapt_rho);
    if (eval->parsed()) {
      const Vector pred = vector_from_file(eval_pred, "predictions");
      const Vector labels = vector_from_file(eval_labels, "labels");
      const MetricsReport metrics = evaluate(pred, labels);
      std::cout << json{{"r2", metrics.r2},
                        {"rmse", metrics.rmse},
                        {"mae", metrics.mae},
                        {"n", metrics.n}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (run->parsed()) {
      std::ifstream in(run_config);
      if (!in) raise(ErrorCode::kIoError, "cannot open for reading: " + run_config);
      std::stringstream buf;
      buf << in.rdbuf();
      const ExperimentConfig config = experiment_config_from_json(buf.str());
      const ExperimentResults results = run_experiment(config);
      write_text_file(run_out, results_to_csv(config, results));
      std::cout << "wrote " << results.cells.size() << " cells to "
                << resolve_output(run_out) << "\n";
      return 0;
    }
    if (verify->parsed())
      return run_verify_theory(verify_k, verify_trials, verify_seed, verify_tol,
                               verify_out);
  } catch (const Error& e) {
    std::cerr << json{{"error", error_code_name(e.code())}, {"message", e.what()}}.dump()
              << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "Unhandled"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace psc
