#include "sbstack/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

namespace sbstack {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - peak).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

std::optional<Eigen::VectorXd> exponentiated_step(const Eigen::VectorXd& w,
                                                  const Eigen::VectorXd& grad, double eta) {
  const double shift = grad.minCoeff();
  Eigen::VectorXd next = w.array() * (-eta * (grad.array() - shift)).exp();
  const double total = next.sum();
  if (!std::isfinite(total) || !(total > 0.0)) return std::nullopt;
  return Eigen::VectorXd(next / total);
}

void check_mixture_tags(const HybridSpec& spec) {
  for (const auto& c : spec.components()) {
    if (c.tag == ObjectiveTag::Interval || c.tag == ObjectiveTag::Discriminative) {
      throw ConfigurationError("objective '" + std::string(to_string(c.tag)) +
                               "' does not apply to mixture stacking");
    }
  }
}

std::vector<Index> fit_rows(const SimulationTable& table, Split split) {
  auto rows = table.rows(split);
  if (rows.empty()) {
    throw ConfigurationError("no rows labeled '" + std::string(to_string(split)) +
                             "' to fit stacking weights on");
  }
  return rows;
}

}  // namespace

Eigen::MatrixXd LocalWeightModel::features(const Eigen::MatrixXd& y) const {
  Eigen::MatrixXd phi = y.rowwise() - feature_mean;
  return phi.array().rowwise() / feature_scale.array();
}

Eigen::MatrixXd LocalWeightModel::row_weights(const Eigen::MatrixXd& y,
                                              std::span<const Index> rows) const {
  const Index K = n_inferences();
  Eigen::MatrixXd selected(static_cast<Index>(rows.size()), y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) selected.row(static_cast<Index>(i)) = y.row(rows[i]);
  const Eigen::MatrixXd phi = features(selected);
  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(selected.rows(), K);
  if (K > 1) {
    logits.rightCols(K - 1) = (phi * coefficients.transpose()).rowwise() + intercepts.transpose();
  }
  return softmax_rows(logits);
}

SimplexWeights LocalWeightModel::weights_at(const Eigen::RowVectorXd& y) const {
  const Index row = 0;
  return SimplexWeights(row_weights(y, std::span<const Index>(&row, 1)).row(0).transpose());
}

Index MixtureFit::n_inferences() const {
  return is_local() ? local_model().n_inferences() : global_weights().size();
}

Eigen::MatrixXd MixtureFit::row_weights(const SimulationTable& table,
                                        std::span<const Index> rows) const {
  if (is_local()) return local_model().row_weights(table.y, rows);
  return global_weights().values().transpose().replicate(static_cast<Index>(rows.size()), 1);
}

MixtureObjective::MixtureObjective(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                                   HybridSpec spec, std::vector<Index> rows,
                                   const MixtureOptions& options)
    : spec_(std::move(spec)),
      rows_(std::move(rows)),
      n_inferences_(ensemble.n_inferences()),
      dim_(ensemble.dim()),
      n_draws_(ensemble.n_draws()),
      options_(options) {
  check_compatible(table, ensemble);
  check_mixture_tags(spec_);
  options_.smoothing.check();
  if (rows_.empty()) throw ConfigurationError("mixture objective needs at least one row");
  const Index n = n_rows();
  const Index K = n_inferences_;

  if (spec_.uses(ObjectiveTag::LogScore)) {
    if (!ensemble.has_log_q()) {
      throw ConfigurationError(
          "objective 'log' needs the logq stream (log q_k(theta_n | y_n)), which the ensemble lacks");
    }
    const Eigen::MatrixXd& lq = ensemble.log_q();
    scaled_density_.resize(n, K);
    density_peak_.resize(n);
    usable_.assign(static_cast<std::size_t>(n), true);
    for (Index i = 0; i < n; ++i) {
      const double peak = lq.col(rows_[static_cast<std::size_t>(i)]).maxCoeff();
      density_peak_[i] = peak;
      if (peak == -kInf) {
        usable_[static_cast<std::size_t>(i)] = false;
        scaled_density_.row(i).setZero();
        ++skipped_;
        continue;
      }
      scaled_density_.row(i) =
          (lq.col(rows_[static_cast<std::size_t>(i)]).transpose().array() - peak).exp();
    }
    usable_count_ = n - skipped_;
    if (usable_count_ == 0) throw NumericalError("log score: every fit row has -inf log density");
  }

  const bool needs_ranks = spec_.uses(ObjectiveTag::RankCvm) ||
                           spec_.uses(ObjectiveTag::RankMean) || spec_.uses(ObjectiveTag::RankLog);
  if (needs_ranks) {
    ranks_.assign(static_cast<std::size_t>(dim_), Eigen::MatrixXd(n, K));
    const double S = static_cast<double>(n_draws_);
    for (Index i = 0; i < n; ++i) {
      const Index row = rows_[static_cast<std::size_t>(i)];
      for (Index k = 0; k < K; ++k) {
        const Eigen::MatrixXd& draws = ensemble.draws(k, row);
        for (Index j = 0; j < dim_; ++j) {
          const auto below = (draws.col(j).array() <= table.theta(row, j)).count();
          ranks_[static_cast<std::size_t>(j)](i, k) = static_cast<double>(below) / S;
        }
      }
    }
  }

  if (spec_.uses(ObjectiveTag::Moment) || spec_.uses(ObjectiveTag::MeanSquared)) {
    if (n_draws_ < 2) throw ConfigurationError("moment objectives need S >= 2 draws");
    theta_.resize(n, dim_);
    means_.reserve(static_cast<std::size_t>(n));
    covariances_.reserve(static_cast<std::size_t>(n * K));
    const double S = static_cast<double>(n_draws_);
    for (Index i = 0; i < n; ++i) {
      const Index row = rows_[static_cast<std::size_t>(i)];
      theta_.row(i) = table.theta.row(row);
      Eigen::MatrixXd mu(K, dim_);
      for (Index k = 0; k < K; ++k) {
        const Eigen::MatrixXd& draws = ensemble.draws(k, row);
        const Eigen::RowVectorXd mean = draws.colwise().mean();
        const Eigen::MatrixXd centered = draws.rowwise() - mean;
        mu.row(k) = mean;
        covariances_.push_back(clamp_covariance(centered.transpose() * centered / S));
      }
      means_.push_back(std::move(mu));
    }
  }
}

Eigen::MatrixXd MixtureObjective::broadcast(const SimplexWeights& weights) const {
  if (weights.size() != n_inferences_) {
    throw DimensionError("mixture objective: weight count differs from inference count");
  }
  return weights.values().transpose().replicate(n_rows(), 1);
}

double MixtureObjective::evaluate(const Eigen::MatrixXd& row_weights,
                                  Eigen::MatrixXd* row_gradient) const {
  if (row_weights.rows() != n_rows() || row_weights.cols() != n_inferences_) {
    throw DimensionError("mixture objective: row weights have the wrong shape");
  }
  if (row_gradient != nullptr) row_gradient->setZero(n_rows(), n_inferences_);
  double total = 0.0;
  Eigen::MatrixXd part;
  const double per_row = spec_.summed_log_score() ? 1.0 / static_cast<double>(n_rows()) : 1.0;
  for (const auto& c : spec_.components()) {
    if (c.multiplier == 0.0) continue;
    const double m = c.tag == ObjectiveTag::LogScore ? c.multiplier : c.multiplier * per_row;
    const double value = component(c.tag, row_weights, row_gradient ? &part : nullptr);
    total += m * value;
    if (row_gradient != nullptr) *row_gradient += m * part;
  }
  return total;
}

double MixtureObjective::evaluate(const SimplexWeights& weights, Eigen::VectorXd* gradient) const {
  const Eigen::MatrixXd w = broadcast(weights);
  if (gradient == nullptr) return evaluate(w, nullptr);
  Eigen::MatrixXd g;
  const double value = evaluate(w, &g);
  *gradient = g.colwise().sum().transpose();
  return value;
}

std::vector<double> MixtureObjective::component_values(const Eigen::MatrixXd& row_weights) const {
  std::vector<double> out;
  for (const auto& c : spec_.components()) out.push_back(component(c.tag, row_weights, nullptr));
  return out;
}

std::vector<double> MixtureObjective::component_values(const SimplexWeights& weights) const {
  return component_values(broadcast(weights));
}

double MixtureObjective::component(ObjectiveTag tag, const Eigen::MatrixXd& w,
                                   Eigen::MatrixXd* grad) const {
  if (grad != nullptr) grad->setZero(n_rows(), n_inferences_);
  switch (tag) {
    case ObjectiveTag::LogScore:
      return log_component(w, grad);
    case ObjectiveTag::RankCvm:
    case ObjectiveTag::RankMean:
    case ObjectiveTag::RankLog:
      return rank_component(tag, w, grad);
    case ObjectiveTag::Moment:
    case ObjectiveTag::MeanSquared:
      return moment_component(tag, w, grad);
    default:
      throw ConfigurationError("objective does not apply to mixture stacking");
  }
}

double MixtureObjective::log_component(const Eigen::MatrixXd& w, Eigen::MatrixXd* grad) const {
  const double used = static_cast<double>(usable_count_);
  double total = 0.0;
  for (Index i = 0; i < n_rows(); ++i) {
    if (!usable_[static_cast<std::size_t>(i)]) continue;
    const double mix = w.row(i).dot(scaled_density_.row(i));
    if (!(mix > 0.0)) return kInf;
    total += density_peak_[i] + std::log(mix);
    if (grad != nullptr) grad->row(i) = -scaled_density_.row(i) / (mix * used);
  }
  return -total / used;
}

double MixtureObjective::rank_component(ObjectiveTag tag, const Eigen::MatrixXd& w,
                                        Eigen::MatrixXd* grad) const {
  const Index n = n_rows();
  const double count = static_cast<double>(n);
  const double floor = 1.0 / (2.0 * static_cast<double>(n_draws_));
  double value = 0.0;
  Eigen::VectorXd mixed(n);
  Eigen::VectorXd d_mixed(n);
  for (const Eigen::MatrixXd& r : ranks_) {
    mixed = w.cwiseProduct(r).rowwise().sum().cwiseMax(0.0).cwiseMin(1.0);
    const std::span<const double> view(mixed.data(), static_cast<std::size_t>(n));
    switch (tag) {
      case ObjectiveTag::RankCvm:
        if (options_.smooth_rank) {
          value += smooth_rank_cvm_distance(view, options_.smoothing.tau_rank,
                                            grad ? &d_mixed : nullptr);
        } else {
          value += rank_cvm_distance(view);
          if (grad != nullptr) d_mixed = rank_cvm_gradient(view);
        }
        break;
      case ObjectiveTag::RankMean: {
        const double gap = mixed.mean() - 0.5;
        value += gap * gap;
        d_mixed.setConstant(2.0 * gap / count);
        break;
      }
      case ObjectiveTag::RankLog: {
        double log_sum = 0.0;
        for (Index i = 0; i < n; ++i) log_sum += std::log(std::max(mixed[i], floor));
        const double gap = log_sum / count + 1.0;
        value += gap * gap;
        for (Index i = 0; i < n; ++i) {
          d_mixed[i] = mixed[i] > floor ? 2.0 * gap / (count * mixed[i]) : 0.0;
        }
        break;
      }
      default:
        break;
    }
    if (grad != nullptr) *grad += d_mixed.asDiagonal() * r;
  }
  return value;
}

double MixtureObjective::moment_component(ObjectiveTag tag, const Eigen::MatrixXd& w,
                                          Eigen::MatrixXd* grad) const {
  const Index n = n_rows();
  const Index K = n_inferences_;
  const double count = static_cast<double>(n);
  double value = 0.0;
  if (dim_ == 1) {
    for (Index i = 0; i < n; ++i) {
      const Eigen::MatrixXd& mu = means_[static_cast<std::size_t>(i)];
      double mean = 0.0;
      for (Index k = 0; k < K; ++k) mean += w(i, k) * mu(k, 0);
      const double e = mean - theta_(i, 0);
      if (tag == ObjectiveTag::MeanSquared) {
        value += e * e;
        if (grad != nullptr) {
          for (Index k = 0; k < K; ++k) (*grad)(i, k) = 2.0 * e * mu(k, 0) / count;
        }
        continue;
      }
      double var = 0.0;
      for (Index k = 0; k < K; ++k) {
        const double spread = mu(k, 0) - mean;
        var += w(i, k) * (covariances_[static_cast<std::size_t>(i * K + k)](0, 0) + spread * spread);
      }
      if (!(var > 0.0)) {
        throw NumericalError("moment score: mixture variance not positive at row " +
                             std::to_string(rows_[static_cast<std::size_t>(i)]));
      }
      value += std::log(var) + e * e / var;
      if (grad != nullptr) {
        const double d_mean = 2.0 * e / var;
        const double d_var = 1.0 / var - (e / var) * (e / var);
        for (Index k = 0; k < K; ++k) {
          const double spread = mu(k, 0) - mean;
          (*grad)(i, k) =
              (d_mean * mu(k, 0) +
               d_var * (covariances_[static_cast<std::size_t>(i * K + k)](0, 0) + spread * spread)) /
              count;
        }
      }
    }
    return value / count;
  }

  for (Index i = 0; i < n; ++i) {
    const Eigen::MatrixXd& mu = means_[static_cast<std::size_t>(i)];
    const Eigen::VectorXd mean = mu.transpose() * w.row(i).transpose();
    const Eigen::VectorXd theta = theta_.row(i).transpose();
    if (tag == ObjectiveTag::MeanSquared) {
      const Eigen::VectorXd e = mean - theta;
      value += e.squaredNorm();
      if (grad != nullptr) grad->row(i) = 2.0 * (mu * e).transpose() / count;
      continue;
    }
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim_, dim_);
    for (Index k = 0; k < K; ++k) {
      const Eigen::VectorXd spread = mu.row(k).transpose() - mean;
      cov += w(i, k) * (covariances_[static_cast<std::size_t>(i * K + k)] + spread * spread.transpose());
    }
    MomentScoreGradient score;
    try {
      score = moment_score_with_gradient(mean, cov, theta);
    } catch (const NumericalError& err) {
      throw NumericalError(std::string(err.what()) + " at row " +
                           std::to_string(rows_[static_cast<std::size_t>(i)]));
    }
    value += score.value;
    if (grad != nullptr) {
      for (Index k = 0; k < K; ++k) {
        const Eigen::VectorXd spread = mu.row(k).transpose() - mean;
        const double g = score.d_mean.dot(mu.row(k).transpose()) +
                         (score.d_cov.cwiseProduct(covariances_[static_cast<std::size_t>(i * K + k)])).sum() +
                         spread.dot(score.d_cov * spread);
        (*grad)(i, k) = g / count;
      }
    }
  }
  return value / count;
}

Eigen::MatrixXd mixed_ranks(const SimplexWeights& weights, const RankTable& ranks) {
  if (weights.size() != ranks.n_inferences()) {
    throw DimensionError("mixed ranks: weight count differs from inference count");
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(ranks.ranks.front().rows(), ranks.ranks.front().cols());
  for (Index k = 0; k < weights.size(); ++k) out += weights[k] * ranks.ranks[static_cast<std::size_t>(k)];
  return out;
}

Eigen::MatrixXd mixed_ranks(const Eigen::MatrixXd& row_weights, const RankTable& ranks,
                            std::span<const Index> rows) {
  if (row_weights.cols() != ranks.n_inferences() ||
      row_weights.rows() != static_cast<Index>(rows.size())) {
    throw DimensionError("mixed ranks: row weights have the wrong shape");
  }
  const Index d = ranks.ranks.front().cols();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(row_weights.rows(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index k = 0; k < row_weights.cols(); ++k) {
      out.row(static_cast<Index>(i)) +=
          row_weights(static_cast<Index>(i), k) * ranks.ranks[static_cast<std::size_t>(k)].row(rows[i]);
    }
  }
  return out;
}

MixtureMoments mixture_moments(const Eigen::MatrixXd& row_weights, const MomentSummary& moments,
                               std::span<const Index> rows) {
  const Index K = moments.n_inferences();
  if (row_weights.cols() != K || row_weights.rows() != static_cast<Index>(rows.size())) {
    throw DimensionError("mixture moments: row weights have the wrong shape");
  }
  const Index d = moments.means.front().cols();
  MixtureMoments out;
  out.means = Eigen::MatrixXd::Zero(row_weights.rows(), d);
  out.covariances.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index r = static_cast<Index>(i);
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d);
    for (Index k = 0; k < K; ++k) {
      mean += row_weights(r, k) * moments.means[static_cast<std::size_t>(k)].row(rows[i]);
    }
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (Index k = 0; k < K; ++k) {
      const Eigen::RowVectorXd spread = moments.means[static_cast<std::size_t>(k)].row(rows[i]) - mean;
      cov += row_weights(r, k) * (moments.covariance(k, rows[i]) + spread.transpose() * spread);
    }
    out.means.row(r) = mean;
    out.covariances.push_back(std::move(cov));
  }
  return out;
}

MixtureMoments mixture_moments(const SimplexWeights& weights, const MomentSummary& moments) {
  if (weights.size() != moments.n_inferences()) {
    throw DimensionError("mixture moments: weight count differs from inference count");
  }
  std::vector<Index> rows(static_cast<std::size_t>(moments.n_sims));
  std::iota(rows.begin(), rows.end(), Index{0});
  return mixture_moments(weights.values().transpose().replicate(moments.n_sims, 1), moments, rows);
}

Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v) {
  std::vector<double> sorted(v.data(), v.data() + v.size());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumulative = 0.0;
  double threshold = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    cumulative += sorted[i];
    const double candidate = (cumulative - 1.0) / static_cast<double>(i + 1);
    if (sorted[i] - candidate > 0.0) threshold = candidate;
  }
  return (v.array() - threshold).cwiseMax(0.0);
}

MixtureFit fit_mixture(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                       const HybridSpec& objective, const MixtureOptions& options) {
  const Index K = ensemble.n_inferences();
  if (K < 2) throw ConfigurationError("stacking needs at least two inferences");
  const MixtureObjective loss(table, ensemble, objective, fit_rows(table, options.fit_split), options);
  std::optional<MixtureObjective> monitor;
  if (options.monitor_split != options.fit_split) {
    auto rows = table.rows(options.monitor_split);
    if (!rows.empty()) monitor.emplace(table, ensemble, objective, std::move(rows), options);
  }

  const double center = 1.0 / static_cast<double>(K);
  auto total_loss = [&](const SimplexWeights& w, Eigen::VectorXd* grad) {
    double value = loss.evaluate(w, grad);
    if (options.weight_ridge > 0.0) {
      const Eigen::ArrayXd offset = w.values().array() - center;
      value += options.weight_ridge * offset.square().sum();
      if (grad != nullptr) *grad += (2.0 * options.weight_ridge * offset).matrix();
    }
    return value;
  };
  auto try_loss = [&](const Eigen::VectorXd& candidate) {
    try {
      return total_loss(SimplexWeights(candidate), nullptr);
    } catch (const NumericalError&) {
      return kInf;
    }
  };

  SimplexWeights w = SimplexWeights::uniform(K);
  Eigen::VectorXd grad;
  double current = total_loss(w, &grad);
  if (!std::isfinite(current) || !grad.allFinite()) {
    throw NumericalError("mixture stacking: non-finite loss at iteration 0");
  }

  MixtureFit fit(w, objective);
  fit.skipped_rows = loss.skipped_rows();
  if (fit.skipped_rows > 0) {
    fit.warnings.push_back(std::to_string(fit.skipped_rows) +
                           " fit rows skipped: log density is -inf for every inference");
  }
  fit.loss_trace.push_back(current);
  if (monitor) fit.monitor_trace.push_back(monitor->evaluate(w));

  const double max_step = options.step * 1e3;
  double eta = options.step;
  int iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    std::optional<Eigen::VectorXd> next;
    double next_loss = kInf;
    if (auto proposal = exponentiated_step(w.values(), grad, eta)) {
      next_loss = try_loss(*proposal);
      if (next_loss <= current) next = std::move(proposal);
    }
    if (!next) {
      eta *= 0.5;
      if (eta >= options.step * 1e-12) continue;
      // Multiplicative steps have stalled; try a projected-gradient step.
      for (double step = 1.0; step > 1e-16 && !next; step *= 0.5) {
        Eigen::VectorXd proposal = project_to_simplex(w.values() - step * grad);
        if (proposal.sum() <= 0.0) continue;
        const double value = try_loss(proposal);
        if (value < current) {
          next = std::move(proposal);
          next_loss = value;
        }
      }
      if (!next) {
        fit.converged = true;
        break;
      }
      eta = options.step;
    } else {
      eta = std::min(eta * 1.25, max_step);
    }

    SimplexWeights accepted(*next);
    const double movement = (accepted.values() - w.values()).lpNorm<1>();
    const double improvement = current - next_loss;
    w = std::move(accepted);
    current = total_loss(w, &grad);
    fit.loss_trace.push_back(current);
    if (monitor) fit.monitor_trace.push_back(monitor->evaluate(w));
    if (improvement < options.loss_tolerance || movement < options.movement_tolerance) {
      fit.converged = true;
      ++iter;
      break;
    }
  }
  fit.iterations = iter;
  fit.weights = w;
  if (!fit.converged) {
    fit.warnings.push_back("mixture stacking stopped at the iteration limit");
  }
  return fit;
}

MixtureFit fit_local_mixture(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                             const HybridSpec& objective, const MixtureOptions& options) {
  if (objective.uses(ObjectiveTag::Moment) || objective.uses(ObjectiveTag::MeanSquared)) {
    throw ConfigurationError("moment objectives are not available with local weights");
  }
  const Index K = ensemble.n_inferences();
  const MixtureFit global = fit_mixture(table, ensemble, objective, options);
  const std::vector<Index> rows = fit_rows(table, options.fit_split);
  const MixtureObjective loss(table, ensemble, objective, rows, options);
  std::optional<MixtureObjective> monitor;
  std::vector<Index> monitor_rows;
  if (options.monitor_split != options.fit_split) {
    monitor_rows = table.rows(options.monitor_split);
    if (!monitor_rows.empty()) monitor.emplace(table, ensemble, objective, monitor_rows, options);
  }

  const Index n = static_cast<Index>(rows.size());
  const Index dy = table.data_dim();
  LocalWeightModel model;
  model.feature_map = options.feature_map;
  model.feature_mean = Eigen::RowVectorXd::Zero(dy);
  model.feature_scale = Eigen::RowVectorXd::Ones(dy);
  Eigen::MatrixXd y_rows(n, dy);
  for (Index i = 0; i < n; ++i) y_rows.row(i) = table.y.row(rows[static_cast<std::size_t>(i)]);
  if (options.feature_map == FeatureMap::Standardized) {
    model.feature_mean = y_rows.colwise().mean();
    const Eigen::MatrixXd centered = y_rows.rowwise() - model.feature_mean;
    for (Index j = 0; j < dy; ++j) {
      const double sd = std::sqrt(centered.col(j).squaredNorm() / static_cast<double>(n));
      model.feature_scale[j] = sd > 0.0 ? sd : 1.0;
    }
  }
  const Eigen::MatrixXd phi = model.features(y_rows);

  const Eigen::VectorXd& w0 = global.global_weights().values();
  model.intercepts.resize(K - 1);
  const double base = std::log(std::max(w0[0], 1e-12));
  for (Index k = 1; k < K; ++k) model.intercepts[k - 1] = std::log(std::max(w0[k], 1e-12)) - base;
  model.coefficients = Eigen::MatrixXd::Zero(K - 1, dy);

  const double ridge = options.coefficient_ridge;
  auto evaluate = [&](const Eigen::VectorXd& a, const Eigen::MatrixXd& B, Eigen::VectorXd* ga,
                      Eigen::MatrixXd* gB) {
    Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(n, K);
    logits.rightCols(K - 1) = (phi * B.transpose()).rowwise() + a.transpose();
    const Eigen::MatrixXd w = softmax_rows(logits);
    Eigen::MatrixXd g;
    double value;
    try {
      value = loss.evaluate(w, ga ? &g : nullptr);
    } catch (const NumericalError&) {
      return kInf;
    }
    value += ridge * B.squaredNorm();
    if (ga != nullptr) {
      const Eigen::VectorXd inner = w.cwiseProduct(g).rowwise().sum();
      const Eigen::MatrixXd d_logits = w.cwiseProduct(g.colwise() - inner);
      *ga = d_logits.rightCols(K - 1).colwise().sum().transpose();
      *gB = d_logits.rightCols(K - 1).transpose() * phi + 2.0 * ridge * B;
      if (options.freeze_coefficients) gB->setZero();
    }
    return value;
  };

  Eigen::VectorXd a = model.intercepts;
  Eigen::MatrixXd B = model.coefficients;
  Eigen::VectorXd ga;
  Eigen::MatrixXd gB;
  double current = evaluate(a, B, &ga, &gB);
  if (!std::isfinite(current)) {
    throw NumericalError("local mixture stacking: non-finite loss at iteration 0");
  }

  MixtureFit fit(model, objective);
  fit.skipped_rows = loss.skipped_rows();
  fit.warnings = global.warnings;
  fit.loss_trace.push_back(current);
  auto record_monitor = [&] {
    if (!monitor) return;
    LocalWeightModel snapshot = model;
    snapshot.intercepts = a;
    snapshot.coefficients = B;
    fit.monitor_trace.push_back(monitor->evaluate(snapshot.row_weights(table.y, monitor_rows)));
  };
  record_monitor();

  double step = 1.0;
  int iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    const double slope = ga.squaredNorm() + gB.squaredNorm();
    if (slope == 0.0) {
      fit.converged = true;
      break;
    }
    bool accepted = false;
    double improvement = 0.0;
    while (step > 1e-16) {
      const Eigen::VectorXd a_next = a - step * ga;
      const Eigen::MatrixXd B_next = B - step * gB;
      const double value = evaluate(a_next, B_next, nullptr, nullptr);
      if (value <= current - 1e-4 * step * slope) {
        a = a_next;
        B = B_next;
        improvement = current - value;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      fit.converged = true;
      break;
    }
    step *= 2.0;
    current = evaluate(a, B, &ga, &gB);
    fit.loss_trace.push_back(current);
    record_monitor();
    if (improvement < options.loss_tolerance) {
      fit.converged = true;
      ++iter;
      break;
    }
  }
  model.intercepts = a;
  model.coefficients = B;
  fit.weights = model;
  fit.iterations = iter;
  if (!fit.converged) fit.warnings.push_back("local mixture stacking stopped at the iteration limit");
  return fit;
}

}  // namespace sbstack
