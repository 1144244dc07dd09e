#pragma once

// Density-mixture stacking: sum_k w_k q_k(theta | y) with weights either on
// the simplex (global) or produced by a linear-softmax model of y (local).

#include <Eigen/Dense>

#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sbstack/core.hpp"
#include "sbstack/scores.hpp"

namespace sbstack {

enum class FeatureMap { Identity, Standardized };

/// w(y) = softmax(0, a_2 + B_2 phi(y), ..., a_K + B_K phi(y)).
struct LocalWeightModel {
  Eigen::VectorXd intercepts;    // K - 1
  Eigen::MatrixXd coefficients;  // (K - 1) x d_y
  FeatureMap feature_map = FeatureMap::Standardized;
  Eigen::RowVectorXd feature_mean;   // d_y, zero for Identity
  Eigen::RowVectorXd feature_scale;  // d_y, one for Identity

  Index n_inferences() const { return intercepts.size() + 1; }

  Eigen::MatrixXd features(const Eigen::MatrixXd& y) const;
  /// rows.size() x K weights for the requested table rows.
  Eigen::MatrixXd row_weights(const Eigen::MatrixXd& y, std::span<const Index> rows) const;
  SimplexWeights weights_at(const Eigen::RowVectorXd& y) const;
};

struct MixtureOptions {
  double step = 0.1;
  int max_iterations = 2000;
  double loss_tolerance = 1e-10;
  double movement_tolerance = 1e-8;
  double weight_ridge = 0.0;  // lambda_w * sum_k (w_k - 1/K)^2
  Split fit_split = Split::Validation;
  Split monitor_split = Split::Train;
  SmoothingConfig smoothing;
  bool smooth_rank = false;  // smoothed empirical CDF in the rank distance

  // Local weights only.
  double coefficient_ridge = 1e-4;
  bool freeze_coefficients = false;
  FeatureMap feature_map = FeatureMap::Standardized;
};

struct MixtureFit {
  MixtureFit(std::variant<SimplexWeights, LocalWeightModel> w, HybridSpec spec)
      : weights(std::move(w)), objective(std::move(spec)) {}

  std::variant<SimplexWeights, LocalWeightModel> weights;
  HybridSpec objective;
  std::vector<double> loss_trace;     // fit rows, one entry per accepted step
  std::vector<double> monitor_trace;  // monitor rows, empty when there are none
  bool converged = false;
  int iterations = 0;
  Index skipped_rows = 0;
  std::vector<std::string> warnings;

  bool is_local() const { return std::holds_alternative<LocalWeightModel>(weights); }
  const SimplexWeights& global_weights() const { return std::get<SimplexWeights>(weights); }
  const LocalWeightModel& local_model() const { return std::get<LocalWeightModel>(weights); }
  Index n_inferences() const;
  Eigen::MatrixXd row_weights(const SimulationTable& table, std::span<const Index> rows) const;
};

/// Composite loss over a fixed row subset, evaluated for per-row weights so
/// that global and local weight models share one gradient path.
class MixtureObjective {
 public:
  MixtureObjective(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                   HybridSpec spec, std::vector<Index> rows, const MixtureOptions& options = {});

  Index n_rows() const { return static_cast<Index>(rows_.size()); }
  Index n_inferences() const { return n_inferences_; }
  const std::vector<Index>& rows() const { return rows_; }
  const HybridSpec& spec() const { return spec_; }
  Index skipped_rows() const { return skipped_; }

  /// Loss for rows.size() x K weights; row_gradient receives d loss / d weights.
  double evaluate(const Eigen::MatrixXd& row_weights, Eigen::MatrixXd* row_gradient = nullptr) const;
  double evaluate(const SimplexWeights& weights, Eigen::VectorXd* gradient = nullptr) const;

  /// Unweighted value of each component, in spec order.
  std::vector<double> component_values(const Eigen::MatrixXd& row_weights) const;
  std::vector<double> component_values(const SimplexWeights& weights) const;

 private:
  double component(ObjectiveTag tag, const Eigen::MatrixXd& w, Eigen::MatrixXd* grad) const;
  double log_component(const Eigen::MatrixXd& w, Eigen::MatrixXd* grad) const;
  double rank_component(ObjectiveTag tag, const Eigen::MatrixXd& w, Eigen::MatrixXd* grad) const;
  double moment_component(ObjectiveTag tag, const Eigen::MatrixXd& w, Eigen::MatrixXd* grad) const;
  Eigen::MatrixXd broadcast(const SimplexWeights& weights) const;

  HybridSpec spec_;
  std::vector<Index> rows_;
  Index n_inferences_ = 0;
  Index dim_ = 0;
  Index n_draws_ = 0;
  MixtureOptions options_;
  Index skipped_ = 0;

  // Log score: exp(log q - row max) and the row max; skipped rows flagged.
  Eigen::MatrixXd scaled_density_;
  Eigen::VectorXd density_peak_;
  std::vector<bool> usable_;
  Index usable_count_ = 0;

  std::vector<Eigen::MatrixXd> ranks_;  // per dimension, n x K

  Eigen::MatrixXd theta_;                    // n x d
  std::vector<Eigen::MatrixXd> means_;       // per row, K x d
  std::vector<Eigen::MatrixXd> covariances_;  // per (row, k), d x d
};

/// r_mix[n, j] = sum_k w_k r_knj.
Eigen::MatrixXd mixed_ranks(const SimplexWeights& weights, const RankTable& ranks);
/// Per-row weights (rows.size() x K) applied to the given rows.
Eigen::MatrixXd mixed_ranks(const Eigen::MatrixXd& row_weights, const RankTable& ranks,
                            std::span<const Index> rows);

struct MixtureMoments {
  Eigen::MatrixXd means;                     // rows x d
  std::vector<Eigen::MatrixXd> covariances;  // rows entries, d x d
};

/// Mean and law-of-total-variance covariance of the weighted mixture.
MixtureMoments mixture_moments(const SimplexWeights& weights, const MomentSummary& moments);
MixtureMoments mixture_moments(const Eigen::MatrixXd& row_weights, const MomentSummary& moments,
                               std::span<const Index> rows);

MixtureFit fit_mixture(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                       const HybridSpec& objective, const MixtureOptions& options = {});

MixtureFit fit_local_mixture(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                             const HybridSpec& objective, const MixtureOptions& options = {});

/// Euclidean projection onto the probability simplex.
Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v);

}  // namespace sbstack
