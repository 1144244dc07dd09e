#pragma once

// Gaussian toy scenarios with analytic truths, plus the brute-force oracles
// (quadrature KL, true quantiles and moments, lattice search) built on them.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sbstack/core.hpp"

namespace sbstack {

/// theta_j | y_j ~ N(offset + slope * y_j, sd^2), independently per dimension.
struct GaussianComponent {
  double offset = 0.0;
  double slope = 1.0;
  double sd = 1.0;

  double mean_at(double y) const { return offset + slope * y; }
};

struct GaussianScenario {
  std::string name;
  std::vector<GaussianComponent> truth;  // mixture components of p(theta | y)
  std::vector<double> truth_weights;     // same length as truth, sums to 1
  std::vector<GaussianComponent> inferences;
  Index dim = 1;  // d = d_y
  Index n_sims = 1000;
  Index n_draws = 100;
  std::uint64_t seed = 0;
  double train_fraction = 0.0;
  double validation_fraction = 0.8;
  double test_fraction = 0.2;

  Index n_inferences() const { return static_cast<Index>(inferences.size()); }
  void check() const;
};

/// Truth N(y, 1); inferences N(y+1, 1), N(y-1, 1), N(y, 0.56), N(y+0.5, 2.45).
GaussianScenario four_corrupted_scenario(Index n_sims, Index n_draws, std::uint64_t seed);
/// Truth 0.5 N(y-1, 1) + 0.5 N(y+1, 1); inferences N(y-1, 1), N(y+1, 1).
GaussianScenario two_component_scenario(Index n_sims, Index n_draws, std::uint64_t seed);
/// Truth N(y, 1); inferences N(y+1, 1), N(y-1, 1).
GaussianScenario symmetric_bias_scenario(Index n_sims, Index n_draws, std::uint64_t seed);
/// Truth N(y, 1); one inference equal to the truth.
GaussianScenario exact_scenario(Index n_sims, Index n_draws, std::uint64_t seed);
/// Truth N(y, 1); inferences N(y+0.6, 0.8), N(y-0.6, 0.8), N(y+1, 1.5). The
/// equal mix of the first two has the true mean and variance.
GaussianScenario moment_scenario(Index n_sims, Index n_draws, std::uint64_t seed);

/// Looks up the named scenarios above ("four-corrupted", "two-component",
/// "symmetric-bias", "exact", "moment").
GaussianScenario named_scenario(const std::string& name, Index n_sims, Index n_draws,
                                std::uint64_t seed);
std::vector<std::string> scenario_names();

struct GeneratedData {
  SimulationTable table;
  PosteriorEnsemble ensemble;
};

GeneratedData generate(const GaussianScenario& scenario);

double normal_log_density(double x, double mean, double sd);
double normal_cdf(double x);
double normal_quantile(double p);

/// E_y KL(p(theta | y) || sum_k w_k q_k(theta | y)) with y ~ N(0, I).
/// Mixture weights need d = 1; a vertex weight works in any d.
double kl_to_truth(const GaussianScenario& scenario, const SimplexWeights& weights);
double kl_to_truth(const GaussianScenario& scenario, Index k);

/// Central (1 - alpha) interval of the true posterior of one coordinate at y.
std::pair<double, double> true_quantiles(const GaussianScenario& scenario, double y, double alpha);
/// Mean and variance of the true posterior of one coordinate at y.
std::pair<double, double> true_moments(const GaussianScenario& scenario, double y);
/// Mean and variance of sum_k w_k q_k for one coordinate at y.
std::pair<double, double> mixture_moments_at(const GaussianScenario& scenario,
                                             const SimplexWeights& weights, double y);

/// Gauss-Hermite nodes and weights for integrals against exp(-x^2).
std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(Index order);

struct GridSearchResult {
  SimplexWeights weights;
  double value;
  Index evaluated;
};

/// Exhaustive minimization over the simplex lattice with spacing `resolution`.
GridSearchResult grid_search_weights(Index n_inferences, double resolution,
                                     const std::function<double(const SimplexWeights&)>& objective);

}  // namespace sbstack
