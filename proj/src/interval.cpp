#include "sbstack/interval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sbstack/scores.hpp"

namespace sbstack {

namespace {

void check_interval_shape(const SimulationTable& table, const IntervalTable& intervals) {
  if (intervals.n_inferences() < 1) throw ConfigurationError("interval table has no inferences");
  const Eigen::MatrixXd& first = intervals.lo.front();
  if (first.rows() != table.n_sims() || first.cols() != table.dim()) {
    std::ostringstream msg;
    msg << "interval table is " << first.rows() << "x" << first.cols() << " per inference, table is "
        << table.n_sims() << "x" << table.dim();
    throw DimensionError(msg.str());
  }
}

struct DimensionProblem {
  Eigen::MatrixXd lo;  // n x K, scaled
  Eigen::MatrixXd hi;  // n x K, scaled
  Eigen::VectorXd theta;
  double alpha;
  double tau;

  double loss(const Eigen::VectorXd& w, Eigen::VectorXd* grad) const {
    const Index K = lo.cols();
    const Eigen::VectorXd lo_star = lo * w.head(K);
    const Eigen::VectorXd hi_star = hi * w.tail(K);
    const Index n = theta.size();
    Eigen::VectorXd d_lo(n);
    Eigen::VectorXd d_hi(n);
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      const auto s = smooth_interval_score(lo_star[i], hi_star[i], theta[i], alpha, tau);
      total += s.value;
      d_lo[i] = s.d_lo;
      d_hi[i] = s.d_hi;
    }
    const double count = static_cast<double>(n);
    if (grad != nullptr) {
      grad->resize(2 * K);
      grad->head(K) = lo.transpose() * d_lo / count;
      grad->tail(K) = hi.transpose() * d_hi / count;
    }
    return total / count;
  }

  // Block-diagonal Hessian of the smooth loss.
  Eigen::MatrixXd hessian(const Eigen::VectorXd& w) const {
    const Index K = lo.cols();
    const Eigen::VectorXd lo_star = lo * w.head(K);
    const Eigen::VectorXd hi_star = hi * w.tail(K);
    const Index n = theta.size();
    const double c = 2.0 / alpha;
    auto curvature = [&](double x) {
      const double h = smooth_heaviside(x, tau);
      const double dh = smooth_heaviside_derivative(x, tau);
      return c * (2.0 * dh + x * (2.0 / tau) * dh * (1.0 - 2.0 * h));
    };
    Eigen::VectorXd c_lo(n);
    Eigen::VectorXd c_hi(n);
    for (Index i = 0; i < n; ++i) {
      c_lo[i] = curvature(lo_star[i] - theta[i]);
      c_hi[i] = curvature(theta[i] - hi_star[i]);
    }
    const double count = static_cast<double>(n);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(2 * K, 2 * K);
    out.topLeftCorner(K, K) = lo.transpose() * c_lo.asDiagonal() * lo / count;
    out.bottomRightCorner(K, K) = hi.transpose() * c_hi.asDiagonal() * hi / count;
    return out;
  }
};

// Damped Newton at the final tau; stops quietly when the Hessian is not
// positive definite or no step decreases the loss.
void newton_polish(const DimensionProblem& p, Eigen::VectorXd& w, std::vector<double>& trace, double scale) {
  Eigen::VectorXd grad;
  double current = p.loss(w, &grad);
  for (int iter = 0; iter < 50; ++iter) {
    const Eigen::LLT<Eigen::MatrixXd> llt(p.hessian(w));
    if (llt.info() != Eigen::Success) return;
    const Eigen::VectorXd dir = -llt.solve(grad);
    const double decrement = -grad.dot(dir);
    if (!(decrement > 1e-24)) return;
    double t = 1.0;
    while (t > 1e-10) {
      const Eigen::VectorXd next = w + t * dir;
      const double value = p.loss(next, nullptr);
      if (value <= current - 1e-4 * t * decrement) {
        w = next;
        current = p.loss(w, &grad);
        trace.push_back(current * scale);
        break;
      }
      t *= 0.5;
    }
    if (t <= 1e-10) return;
  }
}

}  // namespace

IntervalFit fit_intervals(const SimulationTable& table, const IntervalTable& intervals,
                          const IntervalOptions& options) {
  check_interval_shape(table, intervals);
  if (!(intervals.alpha > 0.0 && intervals.alpha < 1.0)) {
    throw ParameterError("interval level alpha must lie in (0, 1)");
  }
  if (!(options.step > 0.0) || !(options.tau_divisor > 0.0) || options.max_iterations < 1) {
    throw ConfigurationError("interval stacking options must be positive");
  }
  const std::vector<Index> rows = table.rows(options.fit_split);
  if (rows.empty()) {
    throw ConfigurationError("no rows labeled '" + std::string(to_string(options.fit_split)) +
                             "' to fit interval weights on");
  }
  const Index K = intervals.n_inferences();
  const Index d = table.dim();
  const Index n = static_cast<Index>(rows.size());

  IntervalFit fit;
  fit.alpha = intervals.alpha;
  fit.weights = Eigen::MatrixXd::Constant(d, 2 * K, 1.0 / static_cast<double>(K));
  fit.loss_trace.resize(static_cast<std::size_t>(d));
  fit.smooth_loss.resize(d);
  fit.exact_loss.resize(d);
  fit.tau.resize(d);
  fit.converged = true;

  for (Index j = 0; j < d; ++j) {
    DimensionProblem p;
    p.alpha = intervals.alpha;
    p.lo.resize(n, K);
    p.hi.resize(n, K);
    p.theta.resize(n);
    for (Index i = 0; i < n; ++i) {
      const Index row = rows[static_cast<std::size_t>(i)];
      for (Index k = 0; k < K; ++k) {
        p.lo(i, k) = intervals.lo[static_cast<std::size_t>(k)](row, j);
        p.hi(i, k) = intervals.hi[static_cast<std::size_t>(k)](row, j);
      }
      p.theta[i] = table.theta(row, j);
    }
    // Work in units of the endpoint scale so step sizes are scale-free.
    double scale = std::sqrt((p.lo.squaredNorm() + p.hi.squaredNorm() + p.theta.squaredNorm()) /
                             static_cast<double>(n * (2 * K + 1)));
    if (!(scale > 0.0) || !std::isfinite(scale)) scale = 1.0;
    p.lo /= scale;
    p.hi /= scale;
    p.theta /= scale;

    Eigen::VectorXd w = fit.weights.row(j).transpose();
    const Eigen::VectorXd lengths = p.hi * w.tail(K) - p.lo * w.head(K);
    double min_length = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      if (lengths[i] > 0.0) min_length = std::min(min_length, lengths[i]);
    }
    const double tau_target = std::isfinite(min_length) ? min_length / options.tau_divisor
                                                        : 1.0 / options.tau_divisor;
    const double mean_length = std::max(lengths.mean(), tau_target);
    p.tau = std::max(tau_target, 0.1 * mean_length);

    auto& trace = fit.loss_trace[static_cast<std::size_t>(j)];
    double step = options.step;
    bool dim_converged = false;
    int iter = 0;
    Eigen::VectorXd grad;
    while (true) {
      double current = p.loss(w, &grad);
      trace.push_back(current * scale);
      bool stalled = false;
      Eigen::VectorXd w_prev;
      Eigen::VectorXd grad_prev;
      while (iter < options.max_iterations) {
        const double slope = grad.squaredNorm();
        if (slope == 0.0) {
          stalled = true;
          break;
        }
        // Barzilai-Borwein trial step, then Armijo backtracking.
        if (w_prev.size() > 0) {
          const Eigen::VectorXd s = w - w_prev;
          const double curvature = s.dot(grad - grad_prev);
          step = curvature > 0.0 ? s.squaredNorm() / curvature : 2.0 * step;
        }
        bool accepted = false;
        double improvement = 0.0;
        while (step > 1e-16) {
          const Eigen::VectorXd next = w - step * grad;
          const double value = p.loss(next, nullptr);
          if (value <= current - 1e-4 * step * slope) {
            w_prev = w;
            grad_prev = grad;
            w = next;
            improvement = current - value;
            accepted = true;
            break;
          }
          step *= 0.5;
        }
        if (!accepted) {
          stalled = true;
          break;
        }
        ++iter;
        current = p.loss(w, &grad);
        trace.push_back(current * scale);
        if (improvement <= options.loss_tolerance * std::max(1.0, std::abs(current))) {
          stalled = true;
          break;
        }
      }
      if (p.tau <= tau_target || !stalled) {
        dim_converged = stalled;
        break;
      }
      p.tau = std::max(tau_target, p.tau / 4.0);
      step = options.step;
    }

    newton_polish(p, w, trace, scale);
    fit.weights.row(j) = w.transpose();
    fit.smooth_loss[j] = p.loss(w, nullptr) * scale;
    fit.tau[j] = p.tau * scale;
    const Eigen::VectorXd lo_star = p.lo * w.head(K);
    const Eigen::VectorXd hi_star = p.hi * w.tail(K);
    double exact = 0.0;
    for (Index i = 0; i < n; ++i) exact += interval_score(lo_star[i], hi_star[i], p.theta[i], p.alpha);
    fit.exact_loss[j] = exact / static_cast<double>(n) * scale;
    fit.iterations += iter;
    if (!dim_converged) {
      fit.converged = false;
      fit.warnings.push_back("interval stacking for dimension " + std::to_string(j) +
                             " stopped at the iteration limit");
    }
  }

  const StackedIntervals stacked = stacked_intervals(fit, intervals, rows);
  const Index crossed = (stacked.lo.array() > stacked.hi.array()).count();
  const double rate = static_cast<double>(crossed) / static_cast<double>(stacked.lo.size());
  if (crossed > 0 && rate > options.crossing_fraction) {
    fit.swap_crossing = true;
    std::ostringstream msg;
    msg << "stacked endpoints cross on " << crossed << " of " << stacked.lo.size()
        << " fit entries; endpoints are reordered to (min, max)";
    fit.warnings.push_back(msg.str());
  }
  return fit;
}

StackedIntervals stacked_intervals(const IntervalFit& fit, const IntervalTable& intervals,
                                   std::span<const Index> rows) {
  const Index K = intervals.n_inferences();
  if (fit.n_inferences() != K || fit.dim() != intervals.lo.front().cols()) {
    throw DimensionError("interval fit does not match the interval table");
  }
  const Index n = static_cast<Index>(rows.size());
  const Index d = fit.dim();
  StackedIntervals out{Eigen::MatrixXd::Zero(n, d), Eigen::MatrixXd::Zero(n, d)};
  for (Index i = 0; i < n; ++i) {
    const Index row = rows[static_cast<std::size_t>(i)];
    for (Index k = 0; k < K; ++k) {
      out.lo.row(i) += intervals.lo[static_cast<std::size_t>(k)].row(row).cwiseProduct(
          fit.weights.col(k).transpose());
      out.hi.row(i) += intervals.hi[static_cast<std::size_t>(k)].row(row).cwiseProduct(
          fit.weights.col(K + k).transpose());
    }
  }
  if (fit.swap_crossing) {
    const Eigen::MatrixXd lo = out.lo.cwiseMin(out.hi);
    out.hi = out.lo.cwiseMax(out.hi);
    out.lo = lo;
  }
  return out;
}

StackedIntervals raw_intervals(const IntervalTable& intervals, Index k, std::span<const Index> rows) {
  if (k < 0 || k >= intervals.n_inferences()) throw DimensionError("inference index out of range");
  const Eigen::MatrixXd& lo = intervals.lo[static_cast<std::size_t>(k)];
  const Eigen::MatrixXd& hi = intervals.hi[static_cast<std::size_t>(k)];
  StackedIntervals out{Eigen::MatrixXd(static_cast<Index>(rows.size()), lo.cols()),
                       Eigen::MatrixXd(static_cast<Index>(rows.size()), lo.cols())};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.lo.row(static_cast<Index>(i)) = lo.row(rows[i]);
    out.hi.row(static_cast<Index>(i)) = hi.row(rows[i]);
  }
  return out;
}

CoverageError coverage_error(const StackedIntervals& intervals, const SimulationTable& table,
                             std::span<const Index> rows, double alpha) {
  if (rows.empty()) throw EvaluationError("coverage error needs at least one row");
  const Index n = static_cast<Index>(rows.size());
  const Index d = table.dim();
  if (intervals.lo.rows() != n || intervals.lo.cols() != d || intervals.hi.rows() != n ||
      intervals.hi.cols() != d) {
    throw DimensionError("coverage error: intervals do not match the requested rows");
  }
  CoverageError out;
  out.coverage = Eigen::VectorXd::Zero(d);
  for (Index i = 0; i < n; ++i) {
    const Index row = rows[static_cast<std::size_t>(i)];
    for (Index j = 0; j < d; ++j) {
      const double t = table.theta(row, j);
      if (intervals.lo(i, j) <= t && t <= intervals.hi(i, j)) out.coverage[j] += 1.0;
    }
  }
  out.coverage /= static_cast<double>(n);
  out.error = (out.coverage.array() - (1.0 - alpha)).abs();
  out.average = out.error.mean();
  return out;
}

Eigen::VectorXd mean_interval_score(const StackedIntervals& intervals, const SimulationTable& table,
                                    std::span<const Index> rows, double alpha) {
  if (rows.empty()) throw EvaluationError("interval score needs at least one row");
  const Index d = table.dim();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index j = 0; j < d; ++j) {
      out[j] += interval_score(intervals.lo(static_cast<Index>(i), j),
                               intervals.hi(static_cast<Index>(i), j), table.theta(rows[i], j), alpha);
    }
  }
  return out / static_cast<double>(rows.size());
}

}  // namespace sbstack
