#pragma once

// Scoring rules and divergence estimators. Every value here is a loss:
// lower is better.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbstack/core.hpp"

namespace sbstack {

/// Logistic step 1 / (1 + exp(-2x/tau)); tau is a length scale.
template <typename Scalar>
Scalar smooth_heaviside(Scalar x, Scalar tau) {
  const Scalar z = Scalar(-2) * x / tau;
  if (z > Scalar(0)) {
    const Scalar e = std::exp(-z);
    return e / (Scalar(1) + e);
  }
  return Scalar(1) / (Scalar(1) + std::exp(z));
}

/// d/dx of smooth_heaviside.
template <typename Scalar>
Scalar smooth_heaviside_derivative(Scalar x, Scalar tau) {
  const Scalar h = smooth_heaviside(x, tau);
  return Scalar(2) / tau * h * (Scalar(1) - h);
}

/// Width plus (2/alpha)-weighted misses on either side.
template <typename Scalar>
Scalar interval_score(Scalar lo, Scalar hi, Scalar theta, Scalar alpha) {
  Scalar score = hi - lo;
  if (theta < lo) score += Scalar(2) / alpha * (lo - theta);
  if (theta > hi) score += Scalar(2) / alpha * (theta - hi);
  return score;
}

template <typename Scalar>
struct IntervalScoreGradient {
  Scalar value;
  Scalar d_lo;
  Scalar d_hi;
};

/// Interval score with indicators replaced by smooth_heaviside(., tau).
template <typename Scalar>
IntervalScoreGradient<Scalar> smooth_interval_score(Scalar lo, Scalar hi, Scalar theta,
                                                    Scalar alpha, Scalar tau) {
  const Scalar c = Scalar(2) / alpha;
  const Scalar below = lo - theta;
  const Scalar above = theta - hi;
  const Scalar h_lo = smooth_heaviside(below, tau);
  const Scalar h_hi = smooth_heaviside(above, tau);
  IntervalScoreGradient<Scalar> out;
  out.value = (hi - lo) + c * below * h_lo + c * above * h_hi;
  out.d_lo = Scalar(-1) + c * (h_lo + below * smooth_heaviside_derivative(below, tau));
  out.d_hi = Scalar(1) - c * (h_hi + above * smooth_heaviside_derivative(above, tau));
  return out;
}

template <typename Scalar>
Scalar interval_score(Scalar lo, Scalar hi, Scalar theta, Scalar alpha, bool smooth, Scalar tau) {
  if (!smooth) return interval_score(lo, hi, theta, alpha);
  return smooth_interval_score(lo, hi, theta, alpha, tau).value;
}

struct MomentScoreGradient {
  double value = 0.0;
  Eigen::VectorXd d_mean;  // 2 V^-1 (mu - theta)
  Eigen::MatrixXd d_cov;   // V^-1 - V^-1 e e^T V^-1
};

/// log det V + (mu - theta)^T V^-1 (mu - theta) with its gradient.
MomentScoreGradient moment_score_with_gradient(const Eigen::VectorXd& mean,
                                               const Eigen::MatrixXd& cov,
                                               const Eigen::VectorXd& theta);

template <typename MeanT, typename CovT, typename ThetaT>
double moment_score(const Eigen::MatrixBase<MeanT>& mean, const Eigen::MatrixBase<CovT>& cov,
                    const Eigen::MatrixBase<ThetaT>& theta) {
  if (cov.rows() == 1) {
    const double v = cov(0, 0);
    if (!(v > 0.0)) throw NumericalError("moment score: variance is not positive");
    const double e = mean(0) - theta(0);
    return std::log(v) + e * e / v;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov.derived());
  if (llt.info() != Eigen::Success) {
    throw NumericalError("moment score: covariance is not positive definite");
  }
  const Eigen::VectorXd e = mean - theta;
  const Eigen::VectorXd z = llt.matrixL().solve(e);
  const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return log_det + z.squaredNorm();
}

struct LogScoreValue {
  double value = 0.0;
  Eigen::VectorXd gradient;  // d value / d w
  Index skipped_rows = 0;    // rows whose log q is -inf for every inference
};

/// -(1/|rows|) sum_n log sum_k w_k exp(log_q(k, n)).
LogScoreValue log_score(const SimplexWeights& weights, const Eigen::MatrixXd& log_q,
                        std::span<const Index> rows);

/// Closed-form integral of (F_hat(t) - t)^2 over [0, 1] for the empirical
/// CDF of `ranks`, computed by sorting in O(N log N).
double rank_cvm_distance(std::span<const double> ranks);

/// Same value through the O(N^2) pairwise max sum.
double rank_cvm_distance_reference(std::span<const double> ranks);

/// Subgradient of rank_cvm_distance with ties broken toward lower index.
Eigen::VectorXd rank_cvm_gradient(std::span<const double> ranks);

struct SmoothingConfig {
  double tau_rank = 1.0 / 100.0;
  double tau_interval_divisor = 1000.0;

  void check() const;
};

/// Cramér-von Mises distance with the empirical CDF built from
/// smooth_heaviside(t - r, tau) and integrated on a midpoint grid.
double smooth_rank_cvm_distance(std::span<const double> ranks, double tau,
                                Eigen::VectorXd* gradient = nullptr, Index grid = 1000);

struct RankMomentPenalties {
  double mean_penalty = 0.0;  // (mean r - 1/2)^2
  double log_penalty = 0.0;   // (mean log r + 1)^2, r floored at 1/(2S)
};

RankMomentPenalties rank_moment_penalties(std::span<const double> mixed_ranks, Index n_draws);

enum class ObjectiveTag {
  LogScore,     // negative log predictive density
  RankCvm,      // rank Cramér-von Mises distance, summed over dimensions
  RankMean,     // (mean rank - 1/2)^2, summed over dimensions
  RankLog,      // (mean log rank + 1)^2, summed over dimensions
  Moment,       // mean moment score
  MeanSquared,  // mean squared error of the posterior mean
  Interval,     // interval score (interval stacking only)
  Discriminative,  // classifier utility (sample stacking only)
};

std::string_view to_string(ObjectiveTag tag);
ObjectiveTag parse_objective_tag(std::string_view name);

struct HybridComponent {
  ObjectiveTag tag;
  double multiplier = 1.0;
};

/// Weighted sum of negative-oriented objectives.
class HybridSpec {
 public:
  HybridSpec() = default;
  explicit HybridSpec(std::vector<HybridComponent> components);

  static HybridSpec single(ObjectiveTag tag) { return HybridSpec({{tag, 1.0}}); }
  /// Summed log score minus lambda times both rank-moment penalties, as in
  /// sum_n log q - lambda (P_log + P_mean). Sets summed_log_score.
  static HybridSpec log_plus_rank_moments(double lambda = 100.0);

  /// When set, a fit treats the log score as a sum over its rows, so every
  /// other component is divided by the row count. hybrid_score ignores it.
  bool summed_log_score() const { return summed_log_score_; }
  HybridSpec& set_summed_log_score(bool on) {
    summed_log_score_ = on;
    return *this;
  }

  const std::vector<HybridComponent>& components() const { return components_; }
  bool uses(ObjectiveTag tag) const;
  double multiplier(ObjectiveTag tag) const;

 private:
  std::vector<HybridComponent> components_;
  bool summed_log_score_ = false;
};

double hybrid_score(const HybridSpec& spec, std::span<const double> component_values);

}  // namespace sbstack
