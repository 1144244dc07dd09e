#include "sbstack/core.hpp"

#include <sstream>

namespace sbstack {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Validation:
      return "validation";
    case Split::Test:
      return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "validation") return Split::Validation;
  if (name == "test") return Split::Test;
  throw SchemaError("unknown split label '" + std::string(name) + "'");
}

SimulationTable::SimulationTable(Eigen::MatrixXd theta_, Eigen::MatrixXd y_,
                                 std::vector<Split> split_)
    : theta(std::move(theta_)), y(std::move(y_)), split(std::move(split_)) {
  if (theta.rows() != y.rows() || static_cast<Index>(split.size()) != theta.rows()) {
    std::ostringstream msg;
    msg << "simulation table rows disagree: theta " << theta.rows() << ", y " << y.rows()
        << ", split " << split.size();
    throw DimensionError(msg.str());
  }
}

std::vector<Index> SimulationTable::rows(Split label) const {
  std::vector<Index> out;
  for (Index n = 0; n < n_sims(); ++n) {
    if (split[static_cast<std::size_t>(n)] == label) out.push_back(n);
  }
  return out;
}

PosteriorEnsemble::PosteriorEnsemble(Index n_inferences, Index n_sims, Index n_draws, Index dim)
    : n_inferences_(n_inferences), n_sims_(n_sims), n_draws_(n_draws), dim_(dim) {
  if (n_inferences < 1 || n_sims < 1 || n_draws < 1 || dim < 1) {
    throw DimensionError("ensemble extents must all be positive");
  }
  draws_.assign(static_cast<std::size_t>(n_inferences * n_sims),
                Eigen::MatrixXd::Zero(n_draws, dim));
}

const Eigen::MatrixXd& PosteriorEnsemble::log_q() const {
  if (!log_q_) throw ConfigurationError("ensemble carries no log-density stream (logq)");
  return *log_q_;
}

void PosteriorEnsemble::set_log_q(Eigen::MatrixXd log_q) {
  if (log_q.rows() != n_inferences_ || log_q.cols() != n_sims_) {
    std::ostringstream msg;
    msg << "logq matrix is " << log_q.rows() << "x" << log_q.cols() << ", expected "
        << n_inferences_ << "x" << n_sims_;
    throw DimensionError(msg.str());
  }
  log_q_ = std::move(log_q);
}

PosteriorEnsemble PosteriorEnsemble::select_inferences(std::span<const Index> ks) const {
  PosteriorEnsemble out(static_cast<Index>(ks.size()), n_sims_, n_draws_, dim_);
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < 0 || ks[i] >= n_inferences_) throw DimensionError("inference index out of range");
    for (Index n = 0; n < n_sims_; ++n) out.draws(static_cast<Index>(i), n) = draws(ks[i], n);
  }
  if (log_q_) {
    Eigen::MatrixXd lq(static_cast<Index>(ks.size()), n_sims_);
    for (std::size_t i = 0; i < ks.size(); ++i) lq.row(static_cast<Index>(i)) = log_q_->row(ks[i]);
    out.set_log_q(std::move(lq));
  }
  return out;
}

SimplexWeights::SimplexWeights(Eigen::VectorXd w) : w_(std::move(w)) {
  if (w_.size() < 1) throw ParameterError("simplex weights need at least one entry");
  for (Index k = 0; k < w_.size(); ++k) {
    if (!std::isfinite(w_[k])) throw ParameterError("simplex weight is not finite");
    if (w_[k] < -kTolerance) throw ParameterError("simplex weight is negative");
    w_[k] = std::max(w_[k], 0.0);
  }
  const double total = w_.sum();
  if (!(total > 0.0)) throw ParameterError("simplex weights sum to zero");
  w_ /= total;
}

SimplexWeights SimplexWeights::uniform(Index k) {
  return SimplexWeights(Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k)));
}

SimplexWeights SimplexWeights::vertex(Index k, Index which) {
  if (which < 0 || which >= k) throw ParameterError("vertex index out of range");
  Eigen::VectorXd w = Eigen::VectorXd::Zero(k);
  w[which] = 1.0;
  return SimplexWeights(std::move(w));
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 row_stream(std::uint64_t seed, std::uint64_t row) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ (row + 1)));
}

double covariance_ridge(const Eigen::MatrixXd& cov) {
  const double d = static_cast<double>(cov.rows());
  return 1e-8 * (1.0 + std::max(cov.trace(), 0.0) / d);
}

Eigen::MatrixXd clamp_covariance(const Eigen::MatrixXd& cov) {
  const double ridge = covariance_ridge(cov);
  if (cov.rows() == 1) return Eigen::MatrixXd::Constant(1, 1, std::max(cov(0, 0), ridge));
  const Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  const Eigen::VectorXd values = eig.eigenvalues();
  if (values.minCoeff() >= ridge) return sym;
  const Eigen::VectorXd clamped = values.cwiseMax(ridge);
  return eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
}

void check_compatible(const SimulationTable& table, const PosteriorEnsemble& ensemble) {
  if (table.n_sims() != ensemble.n_sims()) {
    std::ostringstream msg;
    msg << "table has " << table.n_sims() << " rows but ensemble has " << ensemble.n_sims();
    throw DimensionError(msg.str());
  }
  if (table.dim() != ensemble.dim()) {
    std::ostringstream msg;
    msg << "parameter dimension mismatch: table d=" << table.dim()
        << ", ensemble d=" << ensemble.dim();
    throw DimensionError(msg.str());
  }
}

RankTable compute_ranks(const SimulationTable& table, const PosteriorEnsemble& ensemble) {
  check_compatible(table, ensemble);
  const Index K = ensemble.n_inferences();
  const Index N = ensemble.n_sims();
  const Index S = ensemble.n_draws();
  const Index d = ensemble.dim();
  RankTable out;
  out.n_draws = S;
  out.ranks.assign(static_cast<std::size_t>(K), Eigen::MatrixXd(N, d));
  for (Index k = 0; k < K; ++k) {
    for (Index n = 0; n < N; ++n) {
      const Eigen::MatrixXd& draws = ensemble.draws(k, n);
      for (Index j = 0; j < d; ++j) {
        const double truth = table.theta(n, j);
        const auto below = (draws.col(j).array() <= truth).count();
        out.ranks[static_cast<std::size_t>(k)](n, j) =
            static_cast<double>(below) / static_cast<double>(S);
      }
    }
  }
  return out;
}

MomentSummary compute_moments(const PosteriorEnsemble& ensemble) {
  const Index K = ensemble.n_inferences();
  const Index N = ensemble.n_sims();
  const Index S = ensemble.n_draws();
  const Index d = ensemble.dim();
  if (S < 2) throw DimensionError("moments need at least two draws per row");
  MomentSummary out;
  out.n_sims = N;
  out.means.assign(static_cast<std::size_t>(K), Eigen::MatrixXd(N, d));
  out.covariances.reserve(static_cast<std::size_t>(K * N));
  for (Index k = 0; k < K; ++k) {
    for (Index n = 0; n < N; ++n) {
      const Eigen::MatrixXd& draws = ensemble.draws(k, n);
      const Eigen::RowVectorXd mean = draws.colwise().mean();
      const Eigen::MatrixXd centered = draws.rowwise() - mean;
      const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(S);
      out.means[static_cast<std::size_t>(k)].row(n) = mean;
      out.covariances.push_back(clamp_covariance(cov));
    }
  }
  return out;
}

IntervalTable compute_intervals(const PosteriorEnsemble& ensemble, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ParameterError("interval level alpha must lie in (0, 1), got " + std::to_string(alpha));
  }
  const Index K = ensemble.n_inferences();
  const Index N = ensemble.n_sims();
  const Index S = ensemble.n_draws();
  const Index d = ensemble.dim();
  IntervalTable out;
  out.alpha = alpha;
  out.lo.assign(static_cast<std::size_t>(K), Eigen::MatrixXd(N, d));
  out.hi.assign(static_cast<std::size_t>(K), Eigen::MatrixXd(N, d));
  if (static_cast<double>(S) * alpha / 2.0 < 1.0) {
    std::ostringstream msg;
    msg << "S*alpha/2 = " << static_cast<double>(S) * alpha / 2.0
        << " < 1: interval endpoints sit at the extreme order statistics";
    out.warnings.push_back(msg.str());
  }
  std::vector<double> column(static_cast<std::size_t>(S));
  for (Index k = 0; k < K; ++k) {
    for (Index n = 0; n < N; ++n) {
      const Eigen::MatrixXd& draws = ensemble.draws(k, n);
      for (Index j = 0; j < d; ++j) {
        for (Index s = 0; s < S; ++s) column[static_cast<std::size_t>(s)] = draws(s, j);
        std::sort(column.begin(), column.end());
        const std::span<const double> sorted(column);
        out.lo[static_cast<std::size_t>(k)](n, j) = sorted_quantile(sorted, alpha / 2.0);
        out.hi[static_cast<std::size_t>(k)](n, j) = sorted_quantile(sorted, 1.0 - alpha / 2.0);
      }
    }
  }
  return out;
}

ValidationReport validate(const SimulationTable& table, const PosteriorEnsemble& ensemble) {
  ValidationReport report;
  auto add = [&report](std::string message, std::optional<Index> k = {},
                       std::optional<Index> n = {}, std::optional<Index> s = {}) {
    report.violations.push_back(Violation{std::move(message), k, n, s});
  };

  if (table.n_sims() < 1) add("table has no rows");
  if (table.dim() < 1) add("table parameter dimension is zero");
  if (table.data_dim() < 1) add("table data dimension is zero");
  if (static_cast<Index>(table.split.size()) != table.n_sims()) {
    add("split labels do not cover every table row");
  }
  for (Index n = 0; n < table.theta.rows(); ++n) {
    if (!table.theta.row(n).allFinite()) add("non-finite theta", std::nullopt, n);
  }
  for (Index n = 0; n < table.y.rows(); ++n) {
    if (!table.y.row(n).allFinite()) add("non-finite y", std::nullopt, n);
  }

  if (ensemble.n_draws() < 2) add("fewer than two draws per row (S < 2)");
  if (table.n_sims() != ensemble.n_sims()) {
    add("table has " + std::to_string(table.n_sims()) + " rows but ensemble has " +
        std::to_string(ensemble.n_sims()));
  }
  if (table.dim() != ensemble.dim()) {
    add("parameter dimension mismatch: table d=" + std::to_string(table.dim()) +
        ", ensemble d=" + std::to_string(ensemble.dim()));
  }
  for (Index k = 0; k < ensemble.n_inferences(); ++k) {
    for (Index n = 0; n < ensemble.n_sims(); ++n) {
      const Eigen::MatrixXd& draws = ensemble.draws(k, n);
      if (draws.allFinite()) continue;
      for (Index s = 0; s < draws.rows(); ++s) {
        if (!draws.row(s).allFinite()) add("non-finite draw", k, n, s);
      }
    }
  }
  if (ensemble.has_log_q()) {
    const Eigen::MatrixXd& lq = ensemble.log_q();
    for (Index k = 0; k < lq.rows(); ++k) {
      for (Index n = 0; n < lq.cols(); ++n) {
        if (!std::isfinite(lq(k, n))) add("non-finite logq", k, n);
      }
    }
  }
  return report;
}

}  // namespace sbstack
