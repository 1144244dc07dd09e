#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sbstack/sample.hpp"
#include "sbstack/synthetic.hpp"

using namespace sbstack;

namespace {

std::vector<Index> all_rows(Index n) {
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  return rows;
}

// Draws for each row straight from the truth N(y + shift, sd^2).
std::vector<Eigen::MatrixXd> truth_draws(const SimulationTable& table, Index S, double shift, double sd,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::vector<Eigen::MatrixXd> out;
  for (Index n = 0; n < table.n_sims(); ++n) {
    out.push_back(Eigen::MatrixXd::NullaryExpr(S, 1, [&] { return table.y(n, 0) + shift + sd * z(rng); }));
  }
  return out;
}

}  // namespace

TEST_CASE("classification set layout and class weights") {
  const SimulationTable table(Eigen::MatrixXd::Zero(2, 1), Eigen::MatrixXd::Ones(2, 1),
                              {Split::Validation, Split::Validation});
  const std::vector<Eigen::MatrixXd> draws(2, Eigen::MatrixXd::Constant(3, 1, 5.0));
  const ClassificationSet set = build_classification_set(table, draws, all_rows(2));
  CHECK(set.inputs.rows() == 8);
  CHECK(set.inputs.cols() == 2);
  CHECK(set.n_positive == 2);
  CHECK(set.labels.sum() == 2.0);
  const double pos = (set.weights.array() * set.labels.array()).sum();
  const double neg = (set.weights.array() * (1.0 - set.labels.array())).sum();
  CHECK(pos == doctest::Approx(neg));
  CHECK(pos == doctest::Approx(2.0 * 4.0 / 2.0));

  const ClassWeights one = ClassWeights::for_draws(1);
  CHECK(one.positive == 1.0);
  CHECK(one.negative == 1.0);
  for (Index S = 1; S <= 50; ++S) {
    // C = (S+1)^2 / (2S); positive C S/(S+1), negative C/(S+1).
    const double C = (S + 1.0) * (S + 1.0) / (2.0 * S);
    const ClassWeights w = ClassWeights::for_draws(S);
    CHECK(w.positive == doctest::Approx(C * S / (S + 1.0)).epsilon(1e-15));
    CHECK(w.negative == doctest::Approx(C / (S + 1.0)).epsilon(1e-15));
    CHECK(w.positive == doctest::Approx(S * w.negative).epsilon(1e-15));
  }
}

TEST_CASE("aggregated draws") {
  const GeneratedData data = generate(symmetric_bias_scenario(30, 20000, 4));
  const std::vector<Index> rows = all_rows(30);

  const auto first = aggregate_draws(AffineAggregator::select(2, 1, 0), data.ensemble, rows);
  CHECK(first[7] == data.ensemble.draws(0, 7));

  AffineAggregator point = AffineAggregator::averaging(2, 1);
  point.maps[0].setZero();
  point.maps[1].setZero();
  point.offset[0] = 2.5;
  const auto mass = aggregate_draws(point, data.ensemble, rows);
  CHECK((mass[3].array() == 2.5).all());

  AffineAggregator mix = AffineAggregator::averaging(2, 1);
  mix.maps[0](0, 0) = 0.6;
  mix.maps[1](0, 0) = 0.8;
  const auto out = aggregate_draws(mix, data.ensemble, rows);
  // Per row: 0.6 (y + 1 + e1) + 0.8 (y - 1 + e2) has variance 1.
  double sq = 0.0;
  Index count = 0;
  for (Index n = 0; n < 30; ++n) {
    const double mean = 0.6 * (data.table.y(n, 0) + 1) + 0.8 * (data.table.y(n, 0) - 1);
    sq += (out[static_cast<std::size_t>(n)].array() - mean).square().sum();
    count += out[static_cast<std::size_t>(n)].size();
  }
  CHECK(std::abs(sq / count - 1.0) < 3.0 * std::sqrt(2.0 / count));

  AffineAggregator bad = mix;
  bad.maps[1](0, 0) = std::nan("");
  CHECK_THROWS(bad.check());
}

TEST_CASE("feature gradient matches finite differences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  const Eigen::MatrixXd inputs = Eigen::MatrixXd::NullaryExpr(40, 3, [&] { return z(rng); });
  const FeatureExpansion f = FeatureExpansion::fit(inputs, 16, 7);
  CHECK(f.n_outputs() == 1 + 3 + 16);
  const Eigen::VectorXd beta = Eigen::VectorXd::NullaryExpr(f.n_outputs(), [&] { return z(rng); });
  const Eigen::MatrixXd g = f.input_gradient(inputs, beta, 2);
  REQUIRE(g.cols() == 2);
  const double h = 1e-6;
  for (Index i : {Index{0}, Index{13}, Index{39}}) {
    for (Index c = 0; c < 2; ++c) {
      Eigen::MatrixXd up = inputs.row(i), down = inputs.row(i);
      up(0, c) += h;
      down(0, c) -= h;
      const double fd = ((f.transform(up) * beta)(0) - (f.transform(down) * beta)(0)) / (2 * h);
      CHECK(g(i, c) == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("inner solve is monotone and stationary") {
  const GeneratedData data = generate(symmetric_bias_scenario(300, 10, 5));
  const std::vector<Index> rows = all_rows(300);
  const auto draws = aggregate_draws(AffineAggregator::select(2, 1, 0), data.ensemble, rows);
  const ClassificationSet set = build_classification_set(data.table, draws, rows);
  DiscriminatorOptions opts;
  opts.n_features = 16;
  const FeatureExpansion f = FeatureExpansion::fit(set.inputs, opts.n_features, 1);
  const Eigen::MatrixXd phi = f.transform(set.inputs);
  const InnerSolve inner = train_discriminator(phi, set.labels, set.weights, opts);
  REQUIRE(inner.converged);
  for (std::size_t i = 1; i < inner.trace.size(); ++i) CHECK(inner.trace[i] >= inner.trace[i - 1] - 1e-12);

  // Gradient of the penalized weighted mean log likelihood, written out directly.
  const Eigen::ArrayXd p = (1.0 / (1.0 + (-(phi * inner.beta).array()).exp()));
  Eigen::VectorXd grad = phi.transpose() * (set.weights.array() * (set.labels.array() - p)).matrix();
  grad /= set.weights.sum();
  Eigen::VectorXd penalty = opts.ridge * inner.beta;
  penalty[0] = 0.0;
  CHECK((grad - penalty).norm() < 1e-6);
  CHECK(inner.utility == doctest::Approx(weighted_utility(phi, inner.beta, set.labels, set.weights)));
  // Shifted draws are easy to separate.
  CHECK(inner.utility > -std::log(2.0));
}

TEST_CASE("constant classifier scores minus log two") {
  const Eigen::MatrixXd phi = Eigen::MatrixXd::Ones(4, 1);
  const Eigen::Vector4d labels(1, 0, 0, 0);
  const Eigen::Vector4d weights(1.5, 0.5, 0.5, 0.5);
  CHECK(weighted_utility(phi, Eigen::VectorXd::Zero(1), labels, weights) == doctest::Approx(-std::log(2.0)));
}

TEST_CASE("discriminative gap on calibrated and shifted draws") {
  const GeneratedData data = generate(exact_scenario(5000, 10, 11));
  const std::vector<Index> rows = all_rows(5000);
  const DiscriminativeGap calibrated = discriminative_gap(data.table, truth_draws(data.table, 10, 0.0, 1.0, 1), rows, 2);
  CHECK(std::abs(calibrated.balanced_accuracy - 0.5) < 0.02);
  CHECK(calibrated.utility >= -std::log(2.0) - 3.0 * calibrated.utility_se);
  CHECK(std::abs(calibrated.utility + std::log(2.0)) < 0.02);

  const DiscriminativeGap shifted = discriminative_gap(data.table, truth_draws(data.table, 10, 3.0, 1.0, 1), rows, 2);
  CHECK(shifted.balanced_accuracy > 0.9);

  // Mean matched, variance doubled: linear features cannot see it.
  DiscriminatorOptions linear;
  linear.n_features = 0;
  const auto wide = truth_draws(data.table, 10, 0.0, std::sqrt(2.0), 1);
  const DiscriminativeGap blind = discriminative_gap(data.table, wide, rows, 2, linear);
  CHECK(blind.linear_only);
  CHECK_FALSE(blind.diagnostics.empty());
  CHECK(std::abs(blind.balanced_accuracy - 0.5) < 0.03);
  const DiscriminativeGap sighted = discriminative_gap(data.table, wide, rows, 2);
  CHECK(sighted.balanced_accuracy > blind.balanced_accuracy + 0.02);

  const std::vector<Index> few = all_rows(49);
  CHECK_THROWS_AS(discriminative_gap(data.table, truth_draws(data.table, 10, 0.0, 1.0, 1),
                                     few, 2),
                  ParameterError);
}

TEST_CASE("point mass negatives are trivially separable") {
  const GeneratedData data = generate(exact_scenario(400, 10, 12));
  const std::vector<Index> rows = all_rows(400);
  AffineAggregator point = AffineAggregator::averaging(1, 1);
  point.maps[0].setZero();
  point.offset[0] = 0.0;
  const DiscriminativeGap gap = discriminative_gap(data.table, aggregate_draws(point, data.ensemble, rows), rows, 3);
  CHECK(gap.utility > -std::log(2.0) + 0.2);
}

TEST_CASE("permuting one inference's draws leaves the gap unchanged") {
  const GeneratedData data = generate(symmetric_bias_scenario(2000, 10, 13));
  const std::vector<Index> rows = all_rows(2000);
  const AffineAggregator agg = AffineAggregator::averaging(2, 1);
  const DiscriminativeGap base = discriminative_gap(data.table, aggregate_draws(agg, data.ensemble, rows), rows, 4);
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    PosteriorEnsemble shuffled = data.ensemble;
    std::vector<Index> perm = all_rows(10);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (Index n = 0; n < 2000; ++n) {
      const Eigen::MatrixXd d = data.ensemble.draws(1, n);
      for (Index s = 0; s < 10; ++s) shuffled.draws(1, n).row(s) = d.row(perm[static_cast<std::size_t>(s)]);
    }
    const DiscriminativeGap g = discriminative_gap(data.table, aggregate_draws(agg, shuffled, rows), rows, 4);
    const double se = std::hypot(base.utility_se, g.utility_se);
    CHECK(std::abs(g.utility - base.utility) < 3.0 * se);
  }
}

TEST_CASE("exact inference stays calibrated") {
  GaussianScenario s = symmetric_bias_scenario(2000, 10, 14);
  s.inferences = {{0.0, 1.0, 1.0}, {1.0, 1.0, 1.0}};
  const GeneratedData data = generate(s);
  SampleStackingOptions opts;
  opts.initial = AffineAggregator::select(2, 1, 0);
  opts.init_jitter = 0.0;
  opts.max_rounds = 20;
  const SampleStackingFit fit = fit_sample_stacking(data.table, data.ensemble, opts);
  CHECK(std::abs(fit.utility + std::log(2.0)) < 0.02);
  for (std::size_t i = 1; i < fit.objective_trace.size(); ++i) {
    CHECK(fit.objective_trace[i] <= fit.objective_trace[i - 1] + 1e-12);
  }
}

TEST_CASE("fits are seed deterministic") {
  const GeneratedData data = generate(symmetric_bias_scenario(400, 5, 15));
  SampleStackingOptions opts;
  opts.max_rounds = 15;
  opts.seed = 9;
  const SampleStackingFit a = fit_sample_stacking(data.table, data.ensemble, opts);
  const SampleStackingFit b = fit_sample_stacking(data.table, data.ensemble, opts);
  CHECK(a.aggregator.maps[0] == b.aggregator.maps[0]);
  CHECK(a.aggregator.offset == b.aggregator.offset);
  CHECK(a.utility_trace == b.utility_trace);
  REQUIRE_FALSE(a.objective_trace.empty());
  for (std::size_t i = 1; i < a.objective_trace.size(); ++i) {
    CHECK(a.objective_trace[i] <= a.objective_trace[i - 1] + 1e-12);
  }
}

TEST_CASE("first moment fit is least squares on the posterior means") {
  GaussianScenario s = symmetric_bias_scenario(500, 30, 16);
  s.inferences = {{0.5, 1.2, 1.0}, {-0.3, 0.8, 0.7}};
  const GeneratedData data = generate(s);
  const std::vector<Index> rows = data.table.rows(Split::Validation);
  const AffineAggregator agg = first_moment_fit(data.table, data.ensemble, rows);
  const auto R = static_cast<Index>(rows.size());
  Eigen::MatrixXd X(R, 3);
  Eigen::VectorXd t(R);
  for (Index i = 0; i < R; ++i) {
    const Index n = rows[static_cast<std::size_t>(i)];
    X(i, 0) = 1.0;
    X(i, 1) = data.ensemble.draws(0, n).mean();
    X(i, 2) = data.ensemble.draws(1, n).mean();
    t[i] = data.table.theta(n, 0);
  }
  const Eigen::VectorXd coef = (X.transpose() * X).ldlt().solve(X.transpose() * t);
  CHECK(agg.offset[0] == doctest::Approx(coef[0]).epsilon(1e-8));
  CHECK(agg.maps[0](0, 0) == doctest::Approx(coef[1]).epsilon(1e-8));
  CHECK(agg.maps[1](0, 0) == doctest::Approx(coef[2]).epsilon(1e-8));
}
