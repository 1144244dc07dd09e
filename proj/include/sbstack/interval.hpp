#pragma once

// Interval stacking: per dimension, stacked endpoints are unconstrained
// linear combinations of the inferences' endpoints, lo* = sum_k a_k lo_k and
// hi* = sum_k b_k hi_k, fit to the interval score.

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

#include "sbstack/core.hpp"

namespace sbstack {

struct IntervalOptions {
  double step = 1e-2;  // initial step, in units of the endpoint scale
  int max_iterations = 5000;
  double loss_tolerance = 1e-12;  // relative, per smoothing stage
  Split fit_split = Split::Validation;
  double tau_divisor = 1000.0;       // tau = min stacked length / tau_divisor
  double crossing_fraction = 1e-3;   // swap to (min, max) above this rate
};

struct IntervalFit {
  double alpha = 0.1;
  Eigen::MatrixXd weights;  // d x 2K: lo weights then hi weights
  std::vector<std::vector<double>> loss_trace;  // per dimension, smooth loss per accepted step
  Eigen::VectorXd smooth_loss;  // per dimension, at the final tau
  Eigen::VectorXd exact_loss;   // per dimension, non-smooth score
  Eigen::VectorXd tau;          // per dimension
  bool converged = false;
  int iterations = 0;
  bool swap_crossing = false;
  std::vector<std::string> warnings;

  Index dim() const { return weights.rows(); }
  Index n_inferences() const { return weights.cols() / 2; }
};

IntervalFit fit_intervals(const SimulationTable& table, const IntervalTable& intervals,
                          const IntervalOptions& options = {});

struct StackedIntervals {
  Eigen::MatrixXd lo;  // rows x d
  Eigen::MatrixXd hi;  // rows x d
};

/// Endpoints of the fit on the given rows; crossing endpoints are reordered
/// when the fit flagged crossing.
StackedIntervals stacked_intervals(const IntervalFit& fit, const IntervalTable& intervals,
                                   std::span<const Index> rows);

/// Endpoints of a single inference on the given rows.
StackedIntervals raw_intervals(const IntervalTable& intervals, Index k, std::span<const Index> rows);

struct CoverageError {
  Eigen::VectorXd coverage;  // per dimension, fraction of rows with lo <= theta <= hi
  Eigen::VectorXd error;     // per dimension, |coverage - (1 - alpha)|
  double average = 0.0;
};

/// Intervals are indexed like `rows`.
CoverageError coverage_error(const StackedIntervals& intervals, const SimulationTable& table,
                             std::span<const Index> rows, double alpha);

/// Mean exact interval score per dimension.
Eigen::VectorXd mean_interval_score(const StackedIntervals& intervals, const SimulationTable& table,
                                    std::span<const Index> rows, double alpha);

}  // namespace sbstack
