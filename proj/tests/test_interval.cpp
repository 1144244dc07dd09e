#include <doctest.h>

#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <random>

#include "sbstack/interval.hpp"
#include "sbstack/scores.hpp"
#include "sbstack/synthetic.hpp"

using namespace sbstack;

namespace {

const double z95 = quantile(boost::math::normal(), 0.95);

struct Setup {
  SimulationTable table;
  IntervalTable intervals;
};

// theta ~ N(y, 1); inference k reports y + shift_k -/+ z95 * sd_k.
Setup gaussian_setup(Index N, const std::vector<std::pair<double, double>>& inferences, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  Setup s;
  Eigen::MatrixXd theta(N, 1), y(N, 1);
  std::vector<Split> split(static_cast<std::size_t>(N));
  s.intervals.alpha = 0.1;
  for (std::size_t k = 0; k < inferences.size(); ++k) {
    s.intervals.lo.emplace_back(N, 1);
    s.intervals.hi.emplace_back(N, 1);
  }
  for (Index n = 0; n < N; ++n) {
    y(n, 0) = z(rng);
    theta(n, 0) = y(n, 0) + z(rng);
    split[static_cast<std::size_t>(n)] = n % 2 == 0 ? Split::Validation : Split::Test;
    for (std::size_t k = 0; k < inferences.size(); ++k) {
      const auto [shift, sd] = inferences[k];
      s.intervals.lo[k](n, 0) = y(n, 0) + shift - z95 * sd;
      s.intervals.hi[k](n, 0) = y(n, 0) + shift + z95 * sd;
    }
  }
  s.table = SimulationTable(theta, y, split);
  return s;
}

}  // namespace

TEST_CASE("stacked endpoints are linear in the inputs") {
  IntervalTable iv;
  iv.alpha = 0.1;
  iv.lo = {Eigen::MatrixXd::Constant(1, 1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
  iv.hi = {Eigen::MatrixXd::Constant(1, 1, 2.0), Eigen::MatrixXd::Constant(1, 1, 3.0)};
  IntervalFit fit;
  fit.alpha = 0.1;
  fit.weights.resize(1, 4);
  const Index row[] = {0};

  fit.weights << 1, 0, 1, 0;
  StackedIntervals s = stacked_intervals(fit, iv, row);
  CHECK(s.lo(0, 0) == 0.0);
  CHECK(s.hi(0, 0) == 2.0);

  fit.weights << 0.5, 0.5, 0.5, 0.5;
  s = stacked_intervals(fit, iv, row);
  CHECK(s.lo(0, 0) == doctest::Approx(0.5));
  CHECK(s.hi(0, 0) == doctest::Approx(2.5));

  iv.lo = {Eigen::MatrixXd::Constant(1, 1, 1.0), Eigen::MatrixXd::Constant(1, 1, 0.0)};
  fit.weights << 2, -1, 1, 0;
  s = stacked_intervals(fit, iv, row);
  CHECK(s.lo(0, 0) == doctest::Approx(2.0));

  const StackedIntervals raw = raw_intervals(iv, 1, row);
  CHECK(raw.lo(0, 0) == 0.0);
  CHECK(raw.hi(0, 0) == 3.0);
}

TEST_CASE("coverage error extremes") {
  const Setup s = gaussian_setup(1000, {{0.0, 1.0}}, 1);
  const std::vector<Index> rows = s.table.rows(Split::Test);
  const auto R = static_cast<Index>(rows.size());
  StackedIntervals wide{Eigen::MatrixXd::Constant(R, 1, -1e300), Eigen::MatrixXd::Constant(R, 1, 1e300)};
  CHECK(coverage_error(wide, s.table, rows, 0.1).error[0] == doctest::Approx(0.1));
  StackedIntervals point{Eigen::MatrixXd::Constant(R, 1, 0.123), Eigen::MatrixXd::Constant(R, 1, 0.123)};
  CHECK(coverage_error(point, s.table, rows, 0.1).error[0] == doctest::Approx(0.9));
  CHECK_THROWS(coverage_error(wide, s.table, std::vector<Index>{}, 0.1));
}

TEST_CASE("true quantile intervals cover at the nominal rate") {
  const Index N = 100000;
  const Setup s = gaussian_setup(N, {{0.0, 1.0}}, 2);
  std::vector<Index> all(static_cast<std::size_t>(N));
  for (Index n = 0; n < N; ++n) all[static_cast<std::size_t>(n)] = n;
  const CoverageError ce = coverage_error(raw_intervals(s.intervals, 0, all), s.table, all, 0.1);
  CHECK(ce.error[0] < 3.0 * std::sqrt(0.1 * 0.9 / N));
  CHECK(ce.error[0] < 0.005);
}

TEST_CASE("exact inference keeps pass-through weights") {
  const Setup s = gaussian_setup(20000, {{0.0, 1.0}}, 3);
  const IntervalFit fit = fit_intervals(s.table, s.intervals);
  CHECK(fit.weights(0, 0) == doctest::Approx(1.0).epsilon(0.02));
  CHECK(fit.weights(0, 1) == doctest::Approx(1.0).epsilon(0.02));
  const std::vector<Index> test = s.table.rows(Split::Test);
  const CoverageError ce = coverage_error(stacked_intervals(fit, s.intervals, test), s.table, test, 0.1);
  CHECK(ce.error[0] < 0.01);
}

TEST_CASE("symmetric biased pair stacks to the true quantiles") {
  // Endpoints y +/- 1 -/+ z95; the optimum averages the two blocks.
  const Setup s = gaussian_setup(10000, {{1.0, 1.0}, {-1.0, 1.0}}, 4);
  const IntervalFit fit = fit_intervals(s.table, s.intervals);
  const std::vector<Index> test = s.table.rows(Split::Test);
  const StackedIntervals st = stacked_intervals(fit, s.intervals, test);
  double dev = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double y = s.table.y(test[i], 0);
    dev += std::abs(st.lo(static_cast<Index>(i), 0) - (y - z95)) + std::abs(st.hi(static_cast<Index>(i), 0) - (y + z95));
  }
  CHECK(dev / (2.0 * static_cast<double>(test.size())) < 0.05);
  CHECK(coverage_error(st, s.table, test, 0.1).error[0] < 0.02);
  CHECK((st.lo.array() <= st.hi.array()).all());
}

TEST_CASE("identical inferences reproduce the input score") {
  const Setup s = gaussian_setup(4000, {{0.3, 1.2}, {0.3, 1.2}}, 5);
  const IntervalFit fit = fit_intervals(s.table, s.intervals);
  const std::vector<Index> rows = s.table.rows(Split::Validation);
  const double raw = mean_interval_score(raw_intervals(s.intervals, 0, rows), s.table, rows, 0.1)[0];
  CHECK(fit.exact_loss[0] <= raw + 1e-9);
  CHECK(mean_interval_score(stacked_intervals(fit, s.intervals, rows), s.table, rows, 0.1)[0] ==
        doctest::Approx(fit.exact_loss[0]).epsilon(1e-12));
}

TEST_CASE("smooth and exact loss agree at the final tau") {
  const Setup s = gaussian_setup(5000, {{0.5, 1.0}, {-0.4, 1.4}, {0.0, 0.7}}, 6);
  const IntervalFit fit = fit_intervals(s.table, s.intervals);
  CHECK(std::abs(fit.smooth_loss[0] - fit.exact_loss[0]) < 1e-3 * std::abs(fit.exact_loss[0]));
  // The trace is non-increasing within the final smoothing stage.
  const std::vector<double>& trace = fit.loss_trace[0];
  REQUIRE(trace.size() >= 2);
  CHECK(trace.back() <= trace[trace.size() - 2] + 1e-12);
}

TEST_CASE("scaling all inputs scales the fitted endpoints") {
  const Setup s = gaussian_setup(3000, {{0.5, 1.0}, {-0.4, 1.4}}, 7);
  Setup scaled = s;
  const double c = 3.7;
  scaled.table.theta *= c;
  for (auto& m : scaled.intervals.lo) m *= c;
  for (auto& m : scaled.intervals.hi) m *= c;
  const IntervalFit a = fit_intervals(s.table, s.intervals);
  const IntervalFit b = fit_intervals(scaled.table, scaled.intervals);
  const std::vector<Index> test = s.table.rows(Split::Test);
  const StackedIntervals sa = stacked_intervals(a, s.intervals, test);
  const StackedIntervals sb = stacked_intervals(b, scaled.intervals, test);
  CHECK((sb.lo - c * sa.lo).cwiseAbs().maxCoeff() < 1e-6 * c);
  CHECK((sb.hi - c * sa.hi).cwiseAbs().maxCoeff() < 1e-6 * c);
}

TEST_CASE("true quantiles beat perturbed endpoint maps") {
  // Expected score at (y - z95, y + z95) vs 50 maps (y + a - b z95, y + a + c z95).
  const Index N = 100000;
  const Setup s = gaussian_setup(N, {{0.0, 1.0}}, 8);
  std::mt19937_64 rng(40);
  std::uniform_real_distribution<double> shift(-0.3, 0.3), stretch(0.8, 1.2);
  Eigen::VectorXd truth(N);
  for (Index n = 0; n < N; ++n) {
    truth[n] = interval_score(s.intervals.lo[0](n, 0), s.intervals.hi[0](n, 0), s.table.theta(n, 0), 0.1);
  }
  for (int rep = 0; rep < 50; ++rep) {
    const double a = shift(rng), b = stretch(rng), c = stretch(rng);
    Eigen::VectorXd diff(N);
    for (Index n = 0; n < N; ++n) {
      const double y = s.table.y(n, 0);
      diff[n] = truth[n] - interval_score(y + a - b * z95, y + a + c * z95, s.table.theta(n, 0), 0.1);
    }
    const double mean = diff.mean();
    const double se = std::sqrt((diff.array() - mean).square().sum() / (N - 1) / N);
    CHECK(mean <= 3.0 * se);
  }
}

TEST_CASE("fits are deterministic and per dimension") {
  GeneratedData data = generate(four_corrupted_scenario(2000, 40, 3));
  const IntervalTable iv = compute_intervals(data.ensemble, 0.2);
  const IntervalFit a = fit_intervals(data.table, iv);
  const IntervalFit b = fit_intervals(data.table, iv);
  CHECK(a.weights == b.weights);
  CHECK(a.alpha == 0.2);
  CHECK(a.dim() == 1);
  CHECK(a.n_inferences() == 4);
}
