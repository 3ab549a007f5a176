#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "psc/adaptation.hpp"
#include "psc/errors.hpp"
#include "psc/rng.hpp"
#include "test_helpers.hpp"

using namespace psc;
using namespace psc::testing;

namespace {

ToyRegressor make_random_regressor(Rng& rng, std::size_t in, std::size_t hidden,
                                   std::size_t out) {
  ToyRegressor reg;
  const std::size_t widths[3] = {in, hidden, out};
  for (std::size_t l = 0; l < 2; ++l) {
    RegressorBlock blk;
    blk.weight = rng.normal_matrix(widths[l + 1], widths[l]);
    const double sd = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    for (double& x : blk.weight.data()) x *= sd;
    blk.bias = rng.normal_vector(widths[l + 1]);
    for (double& x : blk.bias) x *= 0.1;
    blk.norm_mean = rng.normal_vector(widths[l + 1]);
    for (double& x : blk.norm_mean) x *= 0.2;
    blk.norm_var.assign(widths[l + 1], 0.0);
    for (double& x : blk.norm_var) x = rng.uniform(0.5, 1.5);
    blk.affine_scale.assign(widths[l + 1], 0.0);
    for (double& x : blk.affine_scale) x = rng.uniform(0.7, 1.3);
    blk.affine_shift = rng.normal_vector(widths[l + 1]);
    for (double& x : blk.affine_shift) x *= 0.1;
    reg.blocks.push_back(std::move(blk));
  }
  reg.head.w = rng.normal_vector(out);
  reg.head.b = rng.normal();
  return reg;
}

// Straightforward reimplementation of the forward pass for cross-checking.
Vector reference_predictions(const ToyRegressor& reg, const Matrix& inputs) {
  Vector preds(inputs.rows());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    Vector x(inputs.row(i), inputs.row(i) + inputs.cols());
    for (const RegressorBlock& blk : reg.blocks) {
      Vector next(blk.weight.rows());
      for (std::size_t j = 0; j < blk.weight.rows(); ++j) {
        double h = blk.bias[j];
        for (std::size_t c = 0; c < blk.weight.cols(); ++c)
          h += blk.weight(j, c) * x[c];
        const double n = (h - blk.norm_mean[j]) / std::sqrt(blk.norm_var[j]);
        next[j] = std::tanh(blk.affine_scale[j] * n + blk.affine_shift[j]);
      }
      x = std::move(next);
    }
    double y = reg.head.b;
    for (std::size_t j = 0; j < x.size(); ++j) y += reg.head.w[j] * x[j];
    preds[i] = y;
  }
  return preds;
}

Vector flatten_affine(const ToyRegressor& reg) {
  Vector flat;
  for (const RegressorBlock& blk : reg.blocks) {
    flat.insert(flat.end(), blk.affine_scale.begin(), blk.affine_scale.end());
    flat.insert(flat.end(), blk.affine_shift.begin(), blk.affine_shift.end());
  }
  return flat;
}

}  // namespace

TEST_SUITE("adaptation") {

TEST_CASE("forward identity configuration") {
  // Single identity-weight block with unit affine: feeding the stored
  // normalization mean gives tanh(0) features and the bias as prediction.
  ToyRegressor reg;
  RegressorBlock blk;
  blk.weight = Matrix::identity(3);
  blk.bias.assign(3, 0.0);
  blk.norm_mean = {0.4, -0.2, 1.1};
  blk.norm_var.assign(3, 1.0);
  blk.affine_scale.assign(3, 1.0);
  blk.affine_shift.assign(3, 0.0);
  reg.blocks.push_back(blk);
  reg.head.w = {1.0, 2.0, 3.0};
  reg.head.b = -0.7;

  Matrix at_mean(1, 3);
  at_mean(0, 0) = 0.4;
  at_mean(0, 1) = -0.2;
  at_mean(0, 2) = 1.1;
  const auto [features, preds] = forward(reg, at_mean);
  CHECK(max_abs(features) < 1e-15);
  CHECK(preds[0] == doctest::Approx(-0.7));
}

TEST_CASE("doubling the affine scale doubles the pre-activation") {
  Rng rng(2);
  ToyRegressor reg = make_random_regressor(rng, 4, 6, 5);
  for (RegressorBlock& blk : reg.blocks) blk.affine_shift.assign(blk.affine_shift.size(), 0.0);
  const Matrix x = rng.normal_matrix(3, 4);

  const ForwardTrace t1 = forward_trace(reg, x);
  ToyRegressor doubled = reg;
  for (double& g : doubled.blocks[0].affine_scale) g *= 2.0;
  const ForwardTrace t2 = forward_trace(doubled, x);
  // Pre-activation = atanh(output) of the first block.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const double a1 = std::atanh(t1.outputs[0](i, j));
      const double a2 = std::atanh(t2.outputs[0](i, j));
      CHECK(a2 == doctest::Approx(2.0 * a1).epsilon(1e-9));
    }
}

TEST_CASE("forward matches a straightforward reimplementation") {
  Rng rng(3);
  const ToyRegressor reg = make_random_regressor(rng, 5, 9, 7);
  const Matrix x = rng.normal_matrix(16, 5);
  const Vector got = predict(reg, x);
  const Vector want = reference_predictions(reg, x);
  for (std::size_t i = 0; i < 16; ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("forward validation") {
  Rng rng(4);
  const ToyRegressor reg = make_random_regressor(rng, 5, 9, 7);
  CHECK_THROWS_AS(forward(reg, rng.normal_matrix(4, 6)), Error);
  Matrix bad = rng.normal_matrix(4, 5);
  bad(2, 2) = std::nan("");
  CHECK_THROWS_AS(forward(reg, bad), Error);
  ToyRegressor empty;
  CHECK_THROWS_AS(forward(empty, rng.normal_matrix(2, 2)), Error);
}

TEST_CASE("capture preserves the function and normalizes activations") {
  Rng rng(5);
  ToyRegressor reg = make_random_regressor(rng, 6, 12, 8);
  const Matrix source = rng.normal_matrix(512, 6);
  const Vector before = predict(reg, source);

  const SourceSpectralModel model =
      capture_source_stats(reg, source, KSelection::fixed(4));
  const Vector after = predict(reg, source);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-10));

  // Normalized pre-affine activations now have mean 0 and variance 1.
  const ForwardTrace trace = forward_trace(reg, source);
  for (std::size_t l = 0; l < reg.blocks.size(); ++l) {
    const Vector mean = column_means(trace.normalized[l]);
    const Vector var = column_vars(trace.normalized[l]);
    for (std::size_t j = 0; j < mean.size(); ++j) {
      CHECK(std::abs(mean[j]) < 1e-9);
      CHECK(var[j] == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  SUBCASE("idempotent") {
    ToyRegressor again = reg;
    const SourceSpectralModel model2 =
        capture_source_stats(again, source, KSelection::fixed(4));
    for (std::size_t l = 0; l < reg.blocks.size(); ++l) {
      CHECK(again.blocks[l].norm_mean == reg.blocks[l].norm_mean);
      CHECK(again.blocks[l].norm_var == reg.blocks[l].norm_var);
      for (std::size_t j = 0; j < reg.blocks[l].affine_scale.size(); ++j) {
        CHECK(again.blocks[l].affine_scale[j] ==
              doctest::Approx(reg.blocks[l].affine_scale[j]).epsilon(1e-12));
        CHECK(again.blocks[l].affine_shift[j] ==
              doctest::Approx(reg.blocks[l].affine_shift[j]).epsilon(1e-12));
      }
    }
    CHECK(model2.tau == doctest::Approx(model.tau).epsilon(1e-9));
  }

  SUBCASE("tau equals the trailing eigenvalue mean of the feature covariance") {
    const Matrix features = forward(reg, source).first;
    const Vector mu = column_means(features);
    Matrix centered = features;
    for (std::size_t i = 0; i < centered.rows(); ++i)
      for (std::size_t j = 0; j < centered.cols(); ++j) centered(i, j) -= mu[j];
    Matrix cov = matmul_at(centered, centered);
    for (double& v : cov.data()) v /= static_cast<double>(features.rows() - 1);
    const EigenDecomposition eig = symmetric_eigen(cov);
    double trail = 0.0;
    for (std::size_t j = 4; j < 8; ++j) trail += eig.values[j];
    CHECK(model.tau == doctest::Approx(trail / 4.0).epsilon(1e-9));
  }
}

TEST_CASE("affine backprop") {
  Rng rng(6);
  const ToyRegressor reg = make_random_regressor(rng, 4, 7, 5);
  const Matrix x = rng.normal_matrix(6, 4);

  SUBCASE("zero feature gradient gives zero parameter gradients") {
    const Matrix zero(6, 5, 0.0);
    const AffineGrads g = backprop_to_affine(reg, x, zero);
    CHECK(g.norm_sq_total() == 0.0);
  }

  SUBCASE("matches finite differences through a quadratic functional") {
    // Scalar functional of the features with a known gradient.
    Rng rng2(7);
    const Matrix c = rng2.normal_matrix(6, 5);
    auto functional = [&](const ToyRegressor& r) {
      const Matrix f = forward(r, x).first;
      double acc = 0.0;
      for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < f.cols(); ++j)
          acc += 0.5 * f(i, j) * f(i, j) + c(i, j) * f(i, j);
      return acc;
    };
    const Matrix f = forward(reg, x).first;
    Matrix fgrad(6, 5);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 5; ++j) fgrad(i, j) = f(i, j) + c(i, j);
    const AffineGrads analytic = backprop_to_affine(reg, x, fgrad);

    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t j = 0; j < reg.blocks[l].affine_scale.size(); ++j) {
        ToyRegressor plus = reg, minus = reg;
        const double h = 1e-6;
        plus.blocks[l].affine_scale[j] += h;
        minus.blocks[l].affine_scale[j] -= h;
        const double fd = (functional(plus) - functional(minus)) / (2.0 * h);
        CHECK(analytic.scale[l][j] == doctest::Approx(fd).epsilon(1e-5));

        plus = reg;
        minus = reg;
        plus.blocks[l].affine_shift[j] += h;
        minus.blocks[l].affine_shift[j] -= h;
        const double fds = (functional(plus) - functional(minus)) / (2.0 * h);
        CHECK(analytic.shift[l][j] == doctest::Approx(fds).epsilon(1e-5));
      }
    }
  }

  SUBCASE("last-layer shift gradient needs no weight matrix") {
    Rng rng2(8);
    const Matrix fgrad = rng2.normal_matrix(6, 5);
    const AffineGrads g = backprop_to_affine(reg, x, fgrad);
    const Matrix features = forward(reg, x).first;
    for (std::size_t j = 0; j < 5; ++j) {
      double want = 0.0;
      for (std::size_t i = 0; i < 6; ++i)
        want += fgrad(i, j) * (1.0 - features(i, j) * features(i, j));
      CHECK(g.shift[1][j] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("optimizer steps") {
  SUBCASE("plain sgd is exactly minus lr times gradient") {
    Optimizer opt(SgdConfig{0.1, 0.0});
    Vector params = {1.0, -2.0};
    opt.step(params, {0.5, -1.0});
    CHECK(params[0] == doctest::Approx(1.0 - 0.1 * 0.5));
    CHECK(params[1] == doctest::Approx(-2.0 + 0.1));
  }

  SUBCASE("momentum accumulates") {
    Optimizer opt(SgdConfig{0.1, 0.9});
    Vector params = {0.0};
    opt.step(params, {1.0});       // velocity 1, param -0.1
    CHECK(params[0] == doctest::Approx(-0.1));
    opt.step(params, {1.0});       // velocity 1.9, param -0.1 - 0.19
    CHECK(params[0] == doctest::Approx(-0.29));
  }

  SUBCASE("adam first step moves by about lr") {
    Optimizer opt(AdamConfig{1e-3, 0.9, 0.999, 1e-8});
    Vector params = {0.0};
    opt.step(params, {42.0});
    CHECK(params[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  }
}

TEST_CASE("adapt_batch basics") {
  Rng rng(9);
  ToyRegressor reg = make_random_regressor(rng, 6, 12, 8);
  const Matrix source = rng.normal_matrix(8192, 6);
  const SourceSpectralModel model =
      capture_source_stats(reg, source, KSelection::fixed(4));
  const ProbeBank bank = build_probe_bank(4);

  SUBCASE("zero learning rate reports loss and changes nothing") {
    AdaptConfig config;
    config.optimizer = SgdConfig{0.0, 0.0};
    config.hyper.lambda_res = 1.0;
    ToyRegressor before = reg;
    const Matrix batch = rng.normal_matrix(32, 6);
    const BatchResult result = adapt_batch(reg, model, bank, config, batch);
    CHECK(result.update_norm == 0.0);
    CHECK(result.report.l_psc > 0.0);
    CHECK(flatten_affine(reg) == flatten_affine(before));
  }

  SUBCASE("batch matching the source statistics produces a near-zero update") {
    AdaptConfig config;
    config.optimizer = SgdConfig{1e-3, 0.0};
    config.hyper.lambda_res = 1.0;
    // The capture batch itself: its feature statistics are the model's.
    const BatchResult result = adapt_batch(reg, model, bank, config, source);
    CHECK_FALSE(result.skipped);
    CHECK(result.update_norm < 1e-6);
  }

  SUBCASE("frozen fields stay bit-identical") {
    AdaptConfig config;
    config.optimizer = AdamConfig{1e-2, 0.9, 0.999, 1e-8};
    config.steps_per_batch = 3;
    config.hyper.lambda_res = 1.0;
    const ToyRegressor before = reg;
    const Matrix batch = rng.normal_matrix(32, 6);
    adapt_batch(reg, model, bank, config, batch);
    for (std::size_t l = 0; l < reg.blocks.size(); ++l) {
      CHECK(reg.blocks[l].weight == before.blocks[l].weight);
      CHECK(reg.blocks[l].bias == before.blocks[l].bias);
      CHECK(reg.blocks[l].norm_mean == before.blocks[l].norm_mean);
      CHECK(reg.blocks[l].norm_var == before.blocks[l].norm_var);
    }
    CHECK(reg.head.w == before.head.w);
    CHECK(reg.head.b == before.head.b);
    CHECK(flatten_affine(reg) != flatten_affine(before));
  }

  SUBCASE("end-to-end affine gradient matches finite differences") {
    AdaptConfig config;
    config.hyper.lambda_res = 0.7;
    const Matrix batch = rng.normal_matrix(24, 6);
    auto loss_of = [&](const ToyRegressor& r) {
      return psc_loss(model, bank, r.head, config.hyper, forward(r, batch).first).l_psc;
    };
    const FeatureGrad fgrad = psc_loss_grad(model, bank, reg.head, config.hyper,
                                            forward(reg, batch).first);
    REQUIRE_FALSE(fgrad.clamp_active);
    const AffineGrads analytic = backprop_to_affine(reg, batch, fgrad.grad);
    Vector flat_analytic;
    for (std::size_t l = 0; l < 2; ++l) {
      flat_analytic.insert(flat_analytic.end(), analytic.scale[l].begin(),
                           analytic.scale[l].end());
      flat_analytic.insert(flat_analytic.end(), analytic.shift[l].begin(),
                           analytic.shift[l].end());
    }
    Vector flat_fd;
    for (std::size_t l = 0; l < 2; ++l) {
      auto fd_param = [&](bool scale, std::size_t j) {
        ToyRegressor plus = reg, minus = reg;
        Vector& pv = scale ? plus.blocks[l].affine_scale : plus.blocks[l].affine_shift;
        Vector& mv = scale ? minus.blocks[l].affine_scale : minus.blocks[l].affine_shift;
        const double h = 1e-5 * (1.0 + std::abs(pv[j]));
        pv[j] += h;
        mv[j] -= h;
        return (loss_of(plus) - loss_of(minus)) / (2.0 * h);
      };
      for (std::size_t j = 0; j < reg.blocks[l].affine_scale.size(); ++j)
        flat_fd.push_back(fd_param(true, j));
      for (std::size_t j = 0; j < reg.blocks[l].affine_shift.size(); ++j)
        flat_fd.push_back(fd_param(false, j));
    }
    CHECK(grad_rel_error(flat_analytic, flat_fd) < 1e-5);
  }
}

TEST_CASE("adapt_stream modes") {
  Rng rng(11);
  ToyRegressor reg = make_random_regressor(rng, 6, 12, 8);
  const Matrix source = rng.normal_matrix(2048, 6);
  const SourceSpectralModel model =
      capture_source_stats(reg, source, KSelection::fixed(4));
  const ProbeBank bank = build_probe_bank(4);

  SUBCASE("empty stream yields an empty trace") {
    AdaptConfig config;
    const AdaptTrace trace = adapt_stream(reg, model, bank, config, {});
    CHECK(trace.size() == 0);
  }

  SUBCASE("episodic mode repeats identical batches identically") {
    AdaptConfig config;
    config.mode = AdaptMode::kEpisodic;
    config.optimizer = SgdConfig{0.05, 0.9};
    config.steps_per_batch = 2;
    config.hyper.lambda_res = 1.0;
    const Matrix batch = rng.normal_matrix(32, 6);
    std::vector<Matrix> batches(3, batch);
    ToyRegressor working = reg;
    const AdaptTrace trace = adapt_stream(working, model, bank, config, batches);
    REQUIRE(trace.size() == 3);
    CHECK(trace.reports[1].l_psc == trace.reports[0].l_psc);
    CHECK(trace.reports[2].l_psc == trace.reports[0].l_psc);
    CHECK(trace.update_norms[1] == trace.update_norms[0]);
  }

  SUBCASE("online mode reduces the loss on a stationary shifted stream") {
    AdaptConfig config;
    config.optimizer = AdamConfig{0.01, 0.9, 0.999, 1e-8};
    config.steps_per_batch = 2;
    config.hyper.lambda_res = 1.0;
    Rng stream_rng(12);
    std::vector<Matrix> batches;
    for (int b = 0; b < 40; ++b) {
      Matrix batch = stream_rng.normal_matrix(64, 6);
      for (std::size_t i = 0; i < batch.rows(); ++i) {
        batch(i, 0) = batch(i, 0) * 2.5 + 1.2;
        batch(i, 1) = batch(i, 1) * 0.5 - 0.8;
      }
      batches.push_back(std::move(batch));
    }
    ToyRegressor working = reg;
    const AdaptTrace trace = adapt_stream(working, model, bank, config, batches);
    double first = 0.0, last = 0.0;
    for (int b = 0; b < 5; ++b) {
      first += trace.reports[b].l_psc;
      last += trace.reports[39 - b].l_psc;
    }
    CHECK(last < first);
  }

  SUBCASE("trace is deterministic") {
    AdaptConfig config;
    config.optimizer = AdamConfig{5e-3, 0.9, 0.999, 1e-8};
    config.hyper.lambda_res = 1.0;
    Rng stream_rng(13);
    std::vector<Matrix> batches;
    for (int b = 0; b < 6; ++b) batches.push_back(stream_rng.normal_matrix(16, 6));
    ToyRegressor r1 = reg, r2 = reg;
    const AdaptTrace t1 = adapt_stream(r1, model, bank, config, batches);
    const AdaptTrace t2 = adapt_stream(r2, model, bank, config, batches);
    REQUIRE(t1.size() == t2.size());
    for (std::size_t b = 0; b < t1.size(); ++b) {
      CHECK(t1.reports[b].l_psc == t2.reports[b].l_psc);  // bit-identical
      CHECK(t1.update_norms[b] == t2.update_norms[b]);
    }
    CHECK(flatten_affine(r1) == flatten_affine(r2));
  }

  SUBCASE("non-finite batches are skipped and flagged") {
    AdaptConfig config;
    config.optimizer = SgdConfig{0.05, 0.0};
    config.hyper.lambda_res = 1.0;
    std::vector<Matrix> batches;
    batches.push_back(rng.normal_matrix(16, 6));
    Matrix bad = rng.normal_matrix(16, 6);
    bad(3, 3) = std::numeric_limits<double>::infinity();
    batches.push_back(bad);
    batches.push_back(rng.normal_matrix(16, 6));
    ToyRegressor working = reg;
    const AdaptTrace trace = adapt_stream(working, model, bank, config, batches);
    REQUIRE(trace.size() == 3);
    CHECK_FALSE(trace.skipped[0]);
    CHECK(trace.skipped[1]);
    CHECK_FALSE(trace.skipped[2]);
    CHECK(trace.update_norms[1] == 0.0);
  }
}

TEST_CASE("checkpoint round trip and validation") {
  Rng rng(14);
  const ToyRegressor reg = make_random_regressor(rng, 5, 8, 6);
  const std::string path =
      (std::filesystem::temp_directory_path() / "psc_reg_test.json").string();
  save_regressor(reg, path);
  const ToyRegressor loaded = load_regressor(path);
  CHECK(loaded.blocks.size() == reg.blocks.size());
  for (std::size_t l = 0; l < reg.blocks.size(); ++l) {
    CHECK(loaded.blocks[l].weight == reg.blocks[l].weight);
    CHECK(loaded.blocks[l].affine_scale == reg.blocks[l].affine_scale);
    CHECK(loaded.blocks[l].norm_var == reg.blocks[l].norm_var);
  }
  CHECK(loaded.head.w == reg.head.w);
  CHECK(loaded.head.b == reg.head.b);
  std::filesystem::remove(path);

  ToyRegressor broken = reg;
  broken.head.w.pop_back();  // dimension-inconsistent
  CHECK_THROWS_AS(regressor_from_json(regressor_to_json(broken)), Error);
}

TEST_CASE("trace exports") {
  Rng rng(15);
  ToyRegressor reg = make_random_regressor(rng, 6, 12, 8);
  const Matrix source = rng.normal_matrix(1024, 6);
  const SourceSpectralModel model =
      capture_source_stats(reg, source, KSelection::fixed(4));
  const ProbeBank bank = build_probe_bank(4);
  AdaptConfig config;
  config.hyper.lambda_res = 1.0;
  std::vector<Matrix> batches;
  for (int b = 0; b < 3; ++b) batches.push_back(rng.normal_matrix(16, 6));
  const AdaptTrace trace = adapt_stream(reg, model, bank, config, batches);

  const auto dir = std::filesystem::temp_directory_path();
  const std::string csv_path = (dir / "psc_trace_test.csv").string();
  const std::string json_path = (dir / "psc_trace_test.json").string();
  write_trace_csv(trace, csv_path);
  write_trace_json(trace, json_path);

  std::ifstream csv(csv_path);
  std::string header;
  std::getline(csv, header);
  CHECK(header == "index,l_sup,l_res,l_psc,update_norm");
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 3);
  std::filesystem::remove(csv_path);
  std::filesystem::remove(json_path);
}

}  // TEST_SUITE
