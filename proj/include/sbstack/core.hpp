#pragma once

// Domain types shared by every stacker: the simulation table, the ensemble
// of approximate posterior draws, simplex weights, and the derived per-draw
// summaries (ranks, moments, central intervals).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbstack/errors.hpp"

namespace sbstack {

using Index = Eigen::Index;

enum class Split : std::uint8_t { Train, Validation, Test };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

/// N paired draws (theta_n, y_n) from the joint, each tagged with a split.
struct SimulationTable {
  Eigen::MatrixXd theta;  // N x d
  Eigen::MatrixXd y;      // N x d_y
  std::vector<Split> split;

  SimulationTable() = default;
  SimulationTable(Eigen::MatrixXd theta_, Eigen::MatrixXd y_, std::vector<Split> split_);

  Index n_sims() const { return theta.rows(); }
  Index dim() const { return theta.cols(); }
  Index data_dim() const { return y.cols(); }

  /// Row indices carrying the given label, ascending.
  std::vector<Index> rows(Split label) const;
};

/// K approximate posteriors, each with S draws per simulation row and an
/// optional log density evaluated at the paired theta_n.
class PosteriorEnsemble {
 public:
  PosteriorEnsemble() = default;
  PosteriorEnsemble(Index n_inferences, Index n_sims, Index n_draws, Index dim);

  Index n_inferences() const { return n_inferences_; }
  Index n_sims() const { return n_sims_; }
  Index n_draws() const { return n_draws_; }
  Index dim() const { return dim_; }

  /// S x d block of draws for inference k on row n.
  Eigen::MatrixXd& draws(Index k, Index n) { return draws_[slot(k, n)]; }
  const Eigen::MatrixXd& draws(Index k, Index n) const { return draws_[slot(k, n)]; }

  bool has_log_q() const { return log_q_.has_value(); }
  /// K x N matrix of log q_k(theta_n | y_n).
  const Eigen::MatrixXd& log_q() const;
  void set_log_q(Eigen::MatrixXd log_q);
  void clear_log_q() { log_q_.reset(); }

  /// Ensemble restricted to a subset of inferences, same row order.
  PosteriorEnsemble select_inferences(std::span<const Index> ks) const;

 private:
  std::size_t slot(Index k, Index n) const {
    return static_cast<std::size_t>(k * n_sims_ + n);
  }

  Index n_inferences_ = 0;
  Index n_sims_ = 0;
  Index n_draws_ = 0;
  Index dim_ = 0;
  std::vector<Eigen::MatrixXd> draws_;
  std::optional<Eigen::MatrixXd> log_q_;
};

/// Nonnegative weights summing to one. Construction renormalizes.
class SimplexWeights {
 public:
  static constexpr double kTolerance = 1e-10;

  explicit SimplexWeights(Eigen::VectorXd w);

  static SimplexWeights uniform(Index k);
  static SimplexWeights vertex(Index k, Index which);

  const Eigen::VectorXd& values() const { return w_; }
  double operator[](Index k) const { return w_[k]; }
  Index size() const { return w_.size(); }

 private:
  Eigen::VectorXd w_;
};

/// r_knj = (1/S) #{s : draw_kns[j] <= theta_n[j]}.
struct RankTable {
  Index n_draws = 0;
  std::vector<Eigen::MatrixXd> ranks;  // K entries, each N x d

  Index n_inferences() const { return static_cast<Index>(ranks.size()); }
};

/// Per (k, n) sample mean and divisor-S covariance of the draws.
struct MomentSummary {
  Index n_sims = 0;
  std::vector<Eigen::MatrixXd> means;        // K entries, each N x d
  std::vector<Eigen::MatrixXd> covariances;  // K*N entries, each d x d

  Index n_inferences() const { return static_cast<Index>(means.size()); }
  const Eigen::MatrixXd& covariance(Index k, Index n) const {
    return covariances[static_cast<std::size_t>(k * n_sims + n)];
  }
};

/// Central (1 - alpha) intervals from the empirical alpha/2 and 1 - alpha/2
/// quantiles of each draw set.
struct IntervalTable {
  double alpha = 0.1;
  std::vector<Eigen::MatrixXd> lo;  // K entries, each N x d
  std::vector<Eigen::MatrixXd> hi;  // K entries, each N x d
  std::vector<std::string> warnings;

  Index n_inferences() const { return static_cast<Index>(lo.size()); }
};

struct Violation {
  std::string message;
  std::optional<Index> k;
  std::optional<Index> n;
  std::optional<Index> s;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

/// Ridge floor used when clamping covariance eigenvalues.
double covariance_ridge(const Eigen::MatrixXd& cov);

/// Symmetrizes and clamps eigenvalues to at least covariance_ridge().
Eigen::MatrixXd clamp_covariance(const Eigen::MatrixXd& cov);

/// Quantile by linear interpolation of order statistics at position
/// p (S - 1) + 1 (one-based). `sorted` must be ascending.
template <typename Scalar>
Scalar sorted_quantile(std::span<const Scalar> sorted, Scalar p) {
  if (sorted.empty()) throw DimensionError("quantile of an empty sample");
  const auto count = static_cast<Scalar>(sorted.size());
  const Scalar pos = std::clamp(p, Scalar(0), Scalar(1)) * (count - 1);
  const auto lower = static_cast<std::size_t>(std::floor(pos));
  const std::size_t upper = std::min(lower + 1, sorted.size() - 1);
  const Scalar frac = pos - static_cast<Scalar>(lower);
  return sorted[lower] + frac * (sorted[upper] - sorted[lower]);
}

/// SplitMix64 finalizer for deriving independent seeds.
std::uint64_t splitmix64(std::uint64_t x);
/// Generator for one row of a seeded computation.
std::mt19937_64 row_stream(std::uint64_t seed, std::uint64_t row);

void check_compatible(const SimulationTable& table, const PosteriorEnsemble& ensemble);

RankTable compute_ranks(const SimulationTable& table, const PosteriorEnsemble& ensemble);
MomentSummary compute_moments(const PosteriorEnsemble& ensemble);
IntervalTable compute_intervals(const PosteriorEnsemble& ensemble, double alpha);
ValidationReport validate(const SimulationTable& table, const PosteriorEnsemble& ensemble);

}  // namespace sbstack
