#include "sbstack/scores.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace sbstack {

namespace {

void check_unit_interval(std::span<const double> ranks) {
  if (ranks.empty()) throw ParameterError("rank distance needs at least one rank");
  for (double r : ranks) {
    if (!(r >= 0.0 && r <= 1.0)) {
      throw ParameterError("rank " + std::to_string(r) + " lies outside [0, 1]");
    }
  }
}

std::vector<std::size_t> stable_order(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return order;
}

}  // namespace

MomentScoreGradient moment_score_with_gradient(const Eigen::VectorXd& mean,
                                               const Eigen::MatrixXd& cov,
                                               const Eigen::VectorXd& theta) {
  MomentScoreGradient out;
  const Eigen::VectorXd e = mean - theta;
  if (cov.rows() == 1) {
    const double v = cov(0, 0);
    if (!(v > 0.0)) throw NumericalError("moment score: variance is not positive");
    const double ratio = e[0] / v;
    out.value = std::log(v) + e[0] * ratio;
    out.d_mean = Eigen::VectorXd::Constant(1, 2.0 * ratio);
    out.d_cov = Eigen::MatrixXd::Constant(1, 1, 1.0 / v - ratio * ratio);
    return out;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("moment score: covariance is not positive definite");
  }
  const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
  const Eigen::VectorXd u = inv * e;
  out.value = 2.0 * llt.matrixLLT().diagonal().array().log().sum() + e.dot(u);
  out.d_mean = 2.0 * u;
  out.d_cov = inv - u * u.transpose();
  return out;
}

LogScoreValue log_score(const SimplexWeights& weights, const Eigen::MatrixXd& log_q,
                        std::span<const Index> rows) {
  const Index K = weights.size();
  if (log_q.rows() != K) throw DimensionError("log score: weight count differs from logq rows");
  LogScoreValue out;
  out.gradient = Eigen::VectorXd::Zero(K);
  double total = 0.0;
  Index used = 0;
  Eigen::VectorXd scaled(K);
  for (Index n : rows) {
    const double peak = log_q.col(n).maxCoeff();
    if (peak == -std::numeric_limits<double>::infinity()) {
      ++out.skipped_rows;
      continue;
    }
    scaled = (log_q.col(n).array() - peak).exp();
    const double mix = weights.values().dot(scaled);
    total += peak + std::log(mix);
    out.gradient -= scaled / mix;
    ++used;
  }
  if (used == 0) throw NumericalError("log score: every row has -inf log density");
  out.value = -total / static_cast<double>(used);
  out.gradient /= static_cast<double>(used);
  return out;
}

double rank_cvm_distance(std::span<const double> ranks) {
  check_unit_interval(ranks);
  std::vector<double> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  // For ascending r, sum_{i,j} max(r_i, r_j) = sum_i r_(i) (2i - 1), i one-based.
  double squares = 0.0;
  double pair_max = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    squares += sorted[i] * sorted[i];
    pair_max += sorted[i] * static_cast<double>(2 * i + 1);
  }
  return squares / n - pair_max / (n * n) + 1.0 / 3.0;
}

double rank_cvm_distance_reference(std::span<const double> ranks) {
  check_unit_interval(ranks);
  const double n = static_cast<double>(ranks.size());
  double squares = 0.0;
  double pair_max = 0.0;
  for (double ri : ranks) {
    squares += ri * ri;
    for (double rj : ranks) pair_max += std::max(ri, rj);
  }
  return squares / n - pair_max / (n * n) + 1.0 / 3.0;
}

Eigen::VectorXd rank_cvm_gradient(std::span<const double> ranks) {
  const auto order = stable_order(ranks);
  const double n = static_cast<double>(ranks.size());
  Eigen::VectorXd grad(static_cast<Index>(ranks.size()));
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t i = order[pos];
    grad[static_cast<Index>(i)] =
        2.0 * ranks[i] / n - static_cast<double>(2 * pos + 1) / (n * n);
  }
  return grad;
}

void SmoothingConfig::check() const {
  if (!(tau_rank > 0.0) || !(tau_interval_divisor > 0.0)) {
    throw ParameterError("smoothing scales must be positive");
  }
}

double smooth_rank_cvm_distance(std::span<const double> ranks, double tau,
                                Eigen::VectorXd* gradient, Index grid) {
  check_unit_interval(ranks);
  if (!(tau > 0.0)) throw ParameterError("smoothing scale must be positive");
  const Index N = static_cast<Index>(ranks.size());
  const double h = 1.0 / static_cast<double>(grid);
  Eigen::VectorXd residual(grid);
  for (Index g = 0; g < grid; ++g) {
    const double t = (static_cast<double>(g) + 0.5) * h;
    double cdf = 0.0;
    for (double r : ranks) cdf += smooth_heaviside(t - r, tau);
    residual[g] = cdf / static_cast<double>(N) - t;
  }
  if (gradient != nullptr) {
    gradient->resize(N);
    for (Index i = 0; i < N; ++i) {
      double acc = 0.0;
      for (Index g = 0; g < grid; ++g) {
        const double t = (static_cast<double>(g) + 0.5) * h;
        acc -= residual[g] * smooth_heaviside_derivative(t - ranks[static_cast<std::size_t>(i)], tau);
      }
      (*gradient)[i] = 2.0 * acc * h / static_cast<double>(N);
    }
  }
  return residual.squaredNorm() * h;
}

RankMomentPenalties rank_moment_penalties(std::span<const double> mixed_ranks, Index n_draws) {
  if (mixed_ranks.empty()) throw ParameterError("rank penalties need at least one rank");
  if (n_draws < 1) throw ParameterError("rank penalties need the draw count S >= 1");
  const double floor = 1.0 / (2.0 * static_cast<double>(n_draws));
  double sum = 0.0;
  double log_sum = 0.0;
  for (double r : mixed_ranks) {
    sum += r;
    log_sum += std::log(std::max(r, floor));
  }
  const double n = static_cast<double>(mixed_ranks.size());
  RankMomentPenalties out;
  out.mean_penalty = std::pow(sum / n - 0.5, 2);
  out.log_penalty = std::pow(log_sum / n + 1.0, 2);
  return out;
}

std::string_view to_string(ObjectiveTag tag) {
  switch (tag) {
    case ObjectiveTag::LogScore:
      return "log";
    case ObjectiveTag::RankCvm:
      return "rank-cvm";
    case ObjectiveTag::RankMean:
      return "rank-mean";
    case ObjectiveTag::RankLog:
      return "rank-log";
    case ObjectiveTag::Moment:
      return "moment";
    case ObjectiveTag::MeanSquared:
      return "mean-sq";
    case ObjectiveTag::Interval:
      return "interval";
    case ObjectiveTag::Discriminative:
      return "discriminative";
  }
  return "unknown";
}

ObjectiveTag parse_objective_tag(std::string_view name) {
  for (auto tag : {ObjectiveTag::LogScore, ObjectiveTag::RankCvm, ObjectiveTag::RankMean,
                   ObjectiveTag::RankLog, ObjectiveTag::Moment, ObjectiveTag::MeanSquared,
                   ObjectiveTag::Interval, ObjectiveTag::Discriminative}) {
    if (to_string(tag) == name) return tag;
  }
  throw ConfigurationError("unknown objective '" + std::string(name) + "'");
}

HybridSpec::HybridSpec(std::vector<HybridComponent> components)
    : components_(std::move(components)) {
  if (components_.empty()) throw ConfigurationError("hybrid objective has no components");
  for (const auto& c : components_) {
    if (!std::isfinite(c.multiplier) || c.multiplier < 0.0) {
      throw ConfigurationError("hybrid multiplier for '" + std::string(to_string(c.tag)) +
                               "' must be finite and nonnegative");
    }
  }
}

HybridSpec HybridSpec::log_plus_rank_moments(double lambda) {
  HybridSpec spec({{ObjectiveTag::LogScore, 1.0},
                   {ObjectiveTag::RankLog, lambda},
                   {ObjectiveTag::RankMean, lambda}});
  spec.set_summed_log_score(true);
  return spec;
}

bool HybridSpec::uses(ObjectiveTag tag) const {
  return std::any_of(components_.begin(), components_.end(),
                     [tag](const HybridComponent& c) { return c.tag == tag && c.multiplier > 0.0; });
}

double HybridSpec::multiplier(ObjectiveTag tag) const {
  double total = 0.0;
  for (const auto& c : components_) {
    if (c.tag == tag) total += c.multiplier;
  }
  return total;
}

double hybrid_score(const HybridSpec& spec, std::span<const double> component_values) {
  const auto& components = spec.components();
  if (component_values.size() != components.size()) {
    throw DimensionError("hybrid score: " + std::to_string(component_values.size()) +
                         " values for " + std::to_string(components.size()) + " components");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < components.size(); ++i) {
    if (!std::isfinite(component_values[i])) {
      throw NumericalError("hybrid score: component value is not finite");
    }
    total += components[i].multiplier * component_values[i];
  }
  return total;
}

}  // namespace sbstack
