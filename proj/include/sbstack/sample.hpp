#pragma once

// Sample stacking: aggregated draws theta* = w0 + sum_k W_k theta_k (draws
// paired by index s) fit so that a weighted logistic discriminator cannot
// tell (theta*, y) from the true (theta, y).

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbstack/core.hpp"

namespace sbstack {

struct AffineAggregator {
  Eigen::VectorXd offset;             // w0, d
  std::vector<Eigen::MatrixXd> maps;  // W_k, K entries of d x d

  Index dim() const { return offset.size(); }
  Index n_inferences() const { return static_cast<Index>(maps.size()); }

  /// W_k = I / K, w0 = 0.
  static AffineAggregator averaging(Index n_inferences, Index dim);
  /// Passes inference k through unchanged.
  static AffineAggregator select(Index n_inferences, Index dim, Index k);
  void check() const;
};

/// One S x d block of aggregated draws per requested row.
std::vector<Eigen::MatrixXd> aggregate_draws(const AffineAggregator& agg,
                                             const PosteriorEnsemble& ensemble,
                                             std::span<const Index> rows);

/// Per-example weights that give both classes total weight N(S+1)/2.
struct ClassWeights {
  double positive = 1.0;  // (S+1)/2
  double negative = 1.0;  // (S+1)/(2S)

  static ClassWeights for_draws(Index n_draws);
};

struct ClassificationSet {
  Eigen::MatrixXd inputs;  // examples x (d + d_y): (theta or theta*, y)
  Eigen::VectorXd labels;  // 1 for the true pair, 0 for aggregated draws
  Eigen::VectorXd weights;
  Index n_rows = 0;
  Index n_draws = 0;
  Index n_positive = 0;
};

/// Per row: the true pair followed by its S draws, all sharing y.
ClassificationSet build_classification_set(const SimulationTable& table,
                                           const std::vector<Eigen::MatrixXd>& draws,
                                           std::span<const Index> rows);

/// Intercept, standardized inputs, and m random Fourier features
/// sqrt(2/m) cos(z^T omega + phase) with omega ~ N(0, I / bandwidth^2).
struct FeatureExpansion {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;
  Eigen::MatrixXd omega;  // (d + d_y) x m
  Eigen::RowVectorXd phase;

  static FeatureExpansion fit(const Eigen::MatrixXd& inputs, Index n_features, std::uint64_t seed,
                              double bandwidth = 1.0);
  Index n_random() const { return omega.cols(); }
  Index n_outputs() const { return 1 + mean.size() + n_random(); }
  Eigen::MatrixXd transform(const Eigen::MatrixXd& inputs) const;
  /// d eta / d inputs[:, 0..cols) for eta = transform(inputs) * beta.
  Eigen::MatrixXd input_gradient(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& beta,
                                 Index cols) const;
};

struct DiscriminatorOptions {
  Index n_features = 64;  // 0 keeps the linear features only
  double bandwidth = 1.0;
  double ridge = 1e-4;
  int max_newton = 100;
  double tolerance = 1e-10;
};

struct Discriminator {
  FeatureExpansion features;
  Eigen::VectorXd beta;

  Eigen::VectorXd probability(const Eigen::MatrixXd& inputs) const;
};

struct InnerSolve {
  Eigen::VectorXd beta;
  double utility = 0.0;            // weighted mean log likelihood
  double penalized_utility = 0.0;  // utility - ridge/2 |beta without intercept|^2
  std::vector<double> trace;       // penalized utility per Newton step
  int iterations = 0;
  bool converged = false;
};

/// Weighted mean log likelihood of labels under logistic(phi * beta); equals
/// -log 2 for a constant 1/2 classifier on balanced weights.
double weighted_utility(const Eigen::MatrixXd& phi, const Eigen::VectorXd& beta,
                        const Eigen::VectorXd& labels, const Eigen::VectorXd& weights);

/// Ridge-penalized weighted logistic regression by damped Newton steps.
InnerSolve train_discriminator(const Eigen::MatrixXd& phi, const Eigen::VectorXd& labels,
                               const Eigen::VectorXd& weights, const DiscriminatorOptions& options,
                               const Eigen::VectorXd* warm_start = nullptr);

struct SampleStackingOptions {
  int max_rounds = 200;
  double step = 0.05;
  double utility_tolerance = 1e-3;  // early stop when |utility + log 2| stays below this
  int patience = 10;
  double min_step = 1e-4;  // stop once rejected steps shrink the step below this
  Split fit_split = Split::Validation;
  std::uint64_t seed = 0;
  DiscriminatorOptions discriminator;
  double init_jitter = 0.1;  // seeded perturbation of the starting maps
  bool moment_prefit = false;  // start from the first-moment least-squares fit
  std::optional<AffineAggregator> initial;
  bool freeze_offset = false;
  bool freeze_maps = false;
};

struct SampleStackingFit {
  AffineAggregator aggregator;
  Discriminator discriminator;
  double utility = 0.0;
  std::vector<double> utility_trace;  // one entry per accepted outer step
  std::vector<double> objective_trace;  // penalized utility, non-increasing
  int rounds = 0;
  bool converged = false;
  std::vector<std::string> warnings;
};

SampleStackingFit fit_sample_stacking(const SimulationTable& table,
                                      const PosteriorEnsemble& ensemble,
                                      const SampleStackingOptions& options = {});

/// Least-squares fit of w0 + sum_k W_k mu_kn to theta_n over the rows.
AffineAggregator first_moment_fit(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                                  std::span<const Index> rows);

struct DiscriminativeGap {
  double utility = 0.0;  // held-out weighted mean log likelihood
  double utility_se = 0.0;
  double balanced_accuracy = 0.0;
  Index n_train_rows = 0;
  Index n_test_rows = 0;
  bool linear_only = false;
  std::vector<std::string> diagnostics;
};

/// Trains a fresh discriminator on half of the rows (seeded split) and
/// scores the other half. `draws` is indexed like `rows`.
DiscriminativeGap discriminative_gap(const SimulationTable& table,
                                     const std::vector<Eigen::MatrixXd>& draws,
                                     std::span<const Index> rows, std::uint64_t seed,
                                     const DiscriminatorOptions& options = {});

}  // namespace sbstack
