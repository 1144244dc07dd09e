#include <doctest.h>

#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <random>

#include "sbstack/synthetic.hpp"

using namespace sbstack;

namespace {

// E_y KL(N(a + b y, s^2) || N(c + e y, t^2)) with y ~ N(0, 1), closed form.
double gaussian_kl(const GaussianComponent& p, const GaussianComponent& q) {
  const double da = p.offset - q.offset;
  const double db = p.slope - q.slope;
  return std::log(q.sd / p.sd) + (p.sd * p.sd + da * da + db * db) / (2 * q.sd * q.sd) - 0.5;
}

GaussianScenario single(GaussianComponent truth, std::vector<GaussianComponent> inferences) {
  GaussianScenario s;
  s.name = "custom";
  s.truth = {truth};
  s.truth_weights = {1.0};
  s.inferences = std::move(inferences);
  return s;
}

}  // namespace

TEST_CASE("four corrupted inferences have the expected KLs") {
  const GaussianScenario s = four_corrupted_scenario(10, 10, 1);
  REQUIRE(s.n_inferences() == 4);
  const double expected[] = {0.5, 0.5, 0.514569, 0.500211};
  for (Index k = 0; k < 4; ++k) {
    const double closed = gaussian_kl(s.truth[0], s.inferences[static_cast<std::size_t>(k)]);
    CHECK(closed == doctest::Approx(expected[k]).epsilon(1e-5));
    CHECK(std::abs(kl_to_truth(s, k) - closed) < 1e-6);
  }
}

TEST_CASE("quadrature KL matches closed form on random pairs") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> offset(-2.0, 2.0);
  std::uniform_real_distribution<double> sd(0.3, 3.0);
  std::uniform_real_distribution<double> slope(0.5, 1.5);
  for (int rep = 0; rep < 100; ++rep) {
    const GaussianComponent truth{offset(rng), 1.0, sd(rng)};
    // Every tenth pair also changes the slope so the y integral is exercised.
    const GaussianComponent q{offset(rng), rep % 10 == 0 ? slope(rng) : 1.0, sd(rng)};
    const GaussianScenario s = single(truth, {q});
    CHECK(std::abs(kl_to_truth(s, 0) - gaussian_kl(truth, q)) < 1e-6);
  }
}

TEST_CASE("KL of the truth against itself is zero") {
  const GaussianScenario s = exact_scenario(10, 10, 1);
  CHECK(std::abs(kl_to_truth(s, 0)) < 1e-6);
  const GaussianScenario shifted = symmetric_bias_scenario(10, 10, 1);
  CHECK(kl_to_truth(shifted, 0) == doctest::Approx(0.5).epsilon(2e-3));
}

TEST_CASE("mixture KL") {
  const GaussianScenario two = two_component_scenario(10, 10, 1);
  CHECK(std::abs(kl_to_truth(two, SimplexWeights::uniform(2))) < 1e-6);
  CHECK(kl_to_truth(two, SimplexWeights(Eigen::Vector2d(0.3, 0.7))) > 0.0);
  // Any mixture weights need d = 1.
  GaussianScenario wide = symmetric_bias_scenario(10, 10, 1);
  wide.dim = 2;
  CHECK_THROWS_AS(kl_to_truth(wide, SimplexWeights::uniform(2)), ConfigurationError);
  CHECK(kl_to_truth(wide, 0) == doctest::Approx(1.0).epsilon(2e-3));
}

TEST_CASE("true quantiles and moments") {
  const GaussianScenario s = exact_scenario(10, 10, 1);
  const auto [lo, hi] = true_quantiles(s, 0.7, 0.1);
  CHECK(lo == doctest::Approx(0.7 - 1.6448536269514722).epsilon(1e-10));
  CHECK(hi == doctest::Approx(0.7 + 1.6448536269514722).epsilon(1e-10));
  const auto [mu, var] = true_moments(s, -0.3);
  CHECK(mu == doctest::Approx(-0.3));
  CHECK(var == doctest::Approx(1.0));

  const GaussianScenario two = two_component_scenario(10, 10, 1);
  const auto [mu2, var2] = true_moments(two, 1.1);
  CHECK(mu2 == doctest::Approx(1.1));
  CHECK(var2 == doctest::Approx(2.0));
  // Mixture quantiles: the CDF of the truth at the endpoints.
  const auto [qlo, qhi] = true_quantiles(two, 1.1, 0.2);
  const boost::math::normal left(0.1, 1.0), right(2.1, 1.0);
  CHECK(0.5 * cdf(left, qlo) + 0.5 * cdf(right, qlo) == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(0.5 * cdf(left, qhi) + 0.5 * cdf(right, qhi) == doctest::Approx(0.9).epsilon(1e-9));
}

TEST_CASE("normal helpers agree with boost") {
  const boost::math::normal standard;
  for (double p : {1e-10, 0.001, 0.05, 0.3, 0.5, 0.77, 0.999}) {
    CHECK(normal_quantile(p) == doctest::Approx(quantile(standard, p)).epsilon(1e-12));
  }
  for (double x : {-8.0, -1.3, 0.0, 0.4, 5.0}) {
    CHECK(normal_cdf(x) == doctest::Approx(cdf(standard, x)).epsilon(1e-13));
  }
}

TEST_CASE("generated log densities are exact") {
  const GaussianScenario s = four_corrupted_scenario(200, 5, 42);
  const GeneratedData data = generate(s);
  for (Index n = 0; n < 200; n += 13) {
    for (Index k = 0; k < s.n_inferences(); ++k) {
      const GaussianComponent& q = s.inferences[static_cast<std::size_t>(k)];
      const boost::math::normal dist(q.mean_at(data.table.y(n, 0)), q.sd);
      CHECK(data.ensemble.log_q()(k, n) ==
            doctest::Approx(std::log(pdf(dist, data.table.theta(n, 0)))).epsilon(1e-12));
    }
  }
}

TEST_CASE("generation is seed deterministic") {
  const GeneratedData a = generate(four_corrupted_scenario(300, 20, 5));
  const GeneratedData b = generate(four_corrupted_scenario(300, 20, 5));
  const GeneratedData c = generate(four_corrupted_scenario(300, 20, 6));
  CHECK(a.table.theta == b.table.theta);
  CHECK(a.table.y == b.table.y);
  CHECK(a.table.split == b.table.split);
  CHECK(a.ensemble.draws(3, 299) == b.ensemble.draws(3, 299));
  CHECK(a.ensemble.log_q() == b.ensemble.log_q());
  CHECK(a.table.theta != c.table.theta);
  // Default split: 80% validation, 20% test.
  CHECK(a.table.rows(Split::Validation).size() == 240);
  CHECK(a.table.rows(Split::Test).size() == 60);
  CHECK(a.table.rows(Split::Train).empty());
}

TEST_CASE("two component truth has conditional mean y and variance 2") {
  const GeneratedData data = generate(two_component_scenario(20000, 2, 8));
  const Eigen::ArrayXd gap = (data.table.theta - data.table.y).array();
  const double mean = gap.mean();
  const double var = (gap - mean).square().mean();
  const double se = std::sqrt(2.0 / 20000.0);
  CHECK(std::abs(mean) < 3 * se);
  // Var of a sample variance with kurtosis of the mixture, loose 5 SE.
  CHECK(std::abs(var - 2.0) < 5 * std::sqrt(2.0 * 4.0 / 20000.0));
}

TEST_CASE("draws follow each inference") {
  const GaussianScenario s = four_corrupted_scenario(400, 50, 3);
  const GeneratedData data = generate(s);
  for (Index k = 0; k < s.n_inferences(); ++k) {
    const GaussianComponent& q = s.inferences[static_cast<std::size_t>(k)];
    double sum = 0.0, sq = 0.0;
    Index count = 0;
    for (Index n = 0; n < 400; ++n) {
      const Eigen::ArrayXd z = (data.ensemble.draws(k, n).col(0).array() - q.mean_at(data.table.y(n, 0))) / q.sd;
      sum += z.sum();
      sq += z.square().sum();
      count += z.size();
    }
    CHECK(std::abs(sum / count) < 3.0 / std::sqrt(count));
    CHECK(std::abs(sq / count - 1.0) < 3.0 * std::sqrt(2.0 / count));
  }
}

TEST_CASE("grid search") {
  int calls = 0;
  const GridSearchResult coarse = grid_search_weights(2, 0.5, [&](const SimplexWeights& w) {
    ++calls;
    return std::abs(w[0] - 0.5);
  });
  CHECK(coarse.evaluated == 3);
  CHECK(calls == 3);
  CHECK(coarse.weights[0] == doctest::Approx(0.5));

  const Eigen::Vector3d target(0.2, 0.35, 0.45);
  const GridSearchResult fine = grid_search_weights(3, 0.05, [&](const SimplexWeights& w) {
    return (w.values() - target).squaredNorm();
  });
  CHECK((fine.weights.values() - target).norm() < 1e-12);
  CHECK(fine.evaluated == 231);

  CHECK_THROWS_AS(grid_search_weights(5, 0.1, [](const SimplexWeights&) { return 0.0; }), ParameterError);
  CHECK_THROWS_AS(grid_search_weights(2, 0.001, [](const SimplexWeights&) { return 0.0; }), ParameterError);
  CHECK_THROWS_AS(grid_search_weights(2, 0.3, [](const SimplexWeights&) { return 0.0; }), ParameterError);
}

TEST_CASE("scenario lookup and checks") {
  for (const auto& name : scenario_names()) CHECK(named_scenario(name, 10, 4, 0).name == name);
  CHECK_THROWS_AS(named_scenario("two-moons", 10, 4, 0), ConfigurationError);
  GaussianScenario bad = exact_scenario(10, 4, 0);
  bad.inferences[0].sd = 0.0;
  CHECK_THROWS_AS(bad.check(), ParameterError);
  bad = exact_scenario(10, 4, 0);
  bad.validation_fraction = 0.9;
  CHECK_THROWS_AS(bad.check(), ParameterError);
}

TEST_CASE("gauss hermite integrates polynomials") {
  const auto [x, w] = gauss_hermite(20);
  // Integral of x^4 exp(-x^2) = 3 sqrt(pi) / 4.
  CHECK((w.array() * x.array().pow(4)).sum() == doctest::Approx(0.75 * std::sqrt(M_PI)).epsilon(1e-12));
  CHECK(w.sum() == doctest::Approx(std::sqrt(M_PI)).epsilon(1e-12));
}
