#include "sbstack/sample.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace sbstack {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::VectorXd penalty_mask(Index p) {
  Eigen::VectorXd mask = Eigen::VectorXd::Ones(p);
  mask[0] = 0.0;
  return mask;
}

double penalized(const Eigen::MatrixXd& phi, const Eigen::VectorXd& beta, const Eigen::VectorXd& labels,
                 const Eigen::VectorXd& weights, double ridge, double* utility) {
  const double u = weighted_utility(phi, beta, labels, weights);
  if (utility != nullptr) *utility = u;
  return u - 0.5 * ridge * beta.tail(beta.size() - 1).squaredNorm();
}

Eigen::VectorXd flatten(const AffineAggregator& agg) {
  const Index d = agg.dim();
  Eigen::VectorXd out(d + agg.n_inferences() * d * d);
  out.head(d) = agg.offset;
  for (Index k = 0; k < agg.n_inferences(); ++k) {
    out.segment(d + k * d * d, d * d) =
        Eigen::Map<const Eigen::VectorXd>(agg.maps[static_cast<std::size_t>(k)].data(), d * d);
  }
  return out;
}

AffineAggregator unflatten(const Eigen::VectorXd& flat, Index K, Index d) {
  AffineAggregator agg;
  agg.offset = flat.head(d);
  for (Index k = 0; k < K; ++k) {
    agg.maps.push_back(Eigen::Map<const Eigen::MatrixXd>(flat.data() + d + k * d * d, d, d));
  }
  return agg;
}

void check_aggregator(const AffineAggregator& agg, const PosteriorEnsemble& ensemble) {
  agg.check();
  if (agg.n_inferences() != ensemble.n_inferences() || agg.dim() != ensemble.dim()) {
    std::ostringstream msg;
    msg << "aggregator has K=" << agg.n_inferences() << ", d=" << agg.dim() << "; ensemble has K="
        << ensemble.n_inferences() << ", d=" << ensemble.dim();
    throw DimensionError(msg.str());
  }
}

}  // namespace

AffineAggregator AffineAggregator::averaging(Index n_inferences, Index dim) {
  AffineAggregator agg;
  agg.offset = Eigen::VectorXd::Zero(dim);
  agg.maps.assign(static_cast<std::size_t>(n_inferences),
                  Eigen::MatrixXd::Identity(dim, dim) / static_cast<double>(n_inferences));
  return agg;
}

AffineAggregator AffineAggregator::select(Index n_inferences, Index dim, Index k) {
  if (k < 0 || k >= n_inferences) throw DimensionError("inference index out of range");
  AffineAggregator agg;
  agg.offset = Eigen::VectorXd::Zero(dim);
  agg.maps.assign(static_cast<std::size_t>(n_inferences), Eigen::MatrixXd::Zero(dim, dim));
  agg.maps[static_cast<std::size_t>(k)].setIdentity();
  return agg;
}

void AffineAggregator::check() const {
  if (maps.empty()) throw DimensionError("aggregator needs at least one map");
  if (!offset.allFinite()) throw ParameterError("aggregator offset is not finite");
  for (const auto& m : maps) {
    if (m.rows() != dim() || m.cols() != dim()) throw DimensionError("aggregator map is not d x d");
    if (!m.allFinite()) throw ParameterError("aggregator map is not finite");
  }
}

std::vector<Eigen::MatrixXd> aggregate_draws(const AffineAggregator& agg,
                                             const PosteriorEnsemble& ensemble,
                                             std::span<const Index> rows) {
  check_aggregator(agg, ensemble);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(rows.size());
  for (Index n : rows) {
    Eigen::MatrixXd block = agg.offset.transpose().replicate(ensemble.n_draws(), 1);
    for (Index k = 0; k < agg.n_inferences(); ++k) {
      block.noalias() += ensemble.draws(k, n) * agg.maps[static_cast<std::size_t>(k)].transpose();
    }
    out.push_back(std::move(block));
  }
  return out;
}

ClassWeights ClassWeights::for_draws(Index n_draws) {
  if (n_draws < 1) throw ParameterError("class weights need S >= 1");
  const double S = static_cast<double>(n_draws);
  // C = (S+1)^2 / (2S); the single true pair carries CS/(S+1), each draw C/(S+1).
  const double C = (S + 1.0) * (S + 1.0) / (2.0 * S);
  return {C * S / (S + 1.0), C / (S + 1.0)};
}

ClassificationSet build_classification_set(const SimulationTable& table,
                                           const std::vector<Eigen::MatrixXd>& draws,
                                           std::span<const Index> rows) {
  if (draws.size() != rows.size()) {
    throw DimensionError("classification set: " + std::to_string(draws.size()) + " draw blocks for " +
                         std::to_string(rows.size()) + " rows");
  }
  if (rows.empty()) throw ParameterError("classification set needs at least one row");
  const Index S = draws.front().rows();
  const Index d = table.dim();
  const Index dy = table.data_dim();
  const ClassWeights cw = ClassWeights::for_draws(S);
  ClassificationSet out;
  out.n_rows = static_cast<Index>(rows.size());
  out.n_draws = S;
  out.n_positive = out.n_rows;
  const Index total = out.n_rows * (S + 1);
  out.inputs.resize(total, d + dy);
  out.labels.resize(total);
  out.weights.resize(total);
  Index at = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Eigen::MatrixXd& block = draws[i];
    if (block.rows() != S || block.cols() != d) {
      throw DimensionError("classification set: draw block " + std::to_string(i) + " has wrong shape");
    }
    const Index n = rows[i];
    out.inputs.row(at) << table.theta.row(n), table.y.row(n);
    out.labels[at] = 1.0;
    out.weights[at] = cw.positive;
    ++at;
    out.inputs.block(at, 0, S, d) = block;
    out.inputs.block(at, d, S, dy) = table.y.row(n).replicate(S, 1);
    out.labels.segment(at, S).setZero();
    out.weights.segment(at, S).setConstant(cw.negative);
    at += S;
  }
  return out;
}

FeatureExpansion FeatureExpansion::fit(const Eigen::MatrixXd& inputs, Index n_features,
                                       std::uint64_t seed, double bandwidth) {
  if (inputs.rows() < 1) throw ParameterError("feature expansion needs at least one input row");
  if (n_features < 0 || !(bandwidth > 0.0)) throw ParameterError("invalid feature expansion size");
  FeatureExpansion f;
  f.mean = inputs.colwise().mean();
  const Eigen::MatrixXd centered = inputs.rowwise() - f.mean;
  f.scale = (centered.colwise().squaredNorm() / static_cast<double>(inputs.rows())).cwiseSqrt();
  for (Index j = 0; j < f.scale.size(); ++j) {
    if (!(f.scale[j] > 0.0)) f.scale[j] = 1.0;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / bandwidth);
  std::uniform_real_distribution<double> uniform(0.0, 2.0 * std::numbers::pi);
  f.omega.resize(inputs.cols(), n_features);
  for (Index m = 0; m < n_features; ++m) {
    for (Index j = 0; j < inputs.cols(); ++j) f.omega(j, m) = normal(rng);
  }
  f.phase.resize(n_features);
  for (Index m = 0; m < n_features; ++m) f.phase[m] = uniform(rng);
  return f;
}

Eigen::MatrixXd FeatureExpansion::transform(const Eigen::MatrixXd& inputs) const {
  const Index p = mean.size();
  const Index m = n_random();
  Eigen::MatrixXd out(inputs.rows(), n_outputs());
  out.col(0).setOnes();
  out.middleCols(1, p) = (inputs.rowwise() - mean).array().rowwise() / scale.array();
  if (m > 0) {
    const Eigen::MatrixXd angles = (out.middleCols(1, p) * omega).rowwise() + phase;
    out.rightCols(m) = std::sqrt(2.0 / static_cast<double>(m)) * angles.array().cos();
  }
  return out;
}

Eigen::MatrixXd FeatureExpansion::input_gradient(const Eigen::MatrixXd& inputs,
                                                 const Eigen::VectorXd& beta, Index cols) const {
  const Index m = n_random();
  Eigen::MatrixXd grad = beta.segment(1, cols).transpose().replicate(inputs.rows(), 1);
  if (m > 0) {
    const Eigen::MatrixXd z = (inputs.rowwise() - mean).array().rowwise() / scale.array();
    const Eigen::MatrixXd angles = (z * omega).rowwise() + phase;
    const Eigen::RowVectorXd coef = -std::sqrt(2.0 / static_cast<double>(m)) * beta.tail(m).transpose();
    const Eigen::MatrixXd slope = angles.array().sin().rowwise() * coef.array();
    grad += slope * omega.topRows(cols).transpose();
  }
  return grad.array().rowwise() / scale.head(cols).array();
}

Eigen::VectorXd Discriminator::probability(const Eigen::MatrixXd& inputs) const {
  const Eigen::VectorXd eta = features.transform(inputs) * beta;
  return eta.unaryExpr([](double x) { return sigmoid(x); });
}

double weighted_utility(const Eigen::MatrixXd& phi, const Eigen::VectorXd& beta,
                        const Eigen::VectorXd& labels, const Eigen::VectorXd& weights) {
  const Eigen::VectorXd eta = phi * beta;
  double total = 0.0;
  for (Index i = 0; i < eta.size(); ++i) {
    const double ll = labels[i] > 0.5 ? -softplus(-eta[i]) : -softplus(eta[i]);
    total += weights[i] * ll;
  }
  return total / weights.sum();
}

InnerSolve train_discriminator(const Eigen::MatrixXd& phi, const Eigen::VectorXd& labels,
                               const Eigen::VectorXd& weights, const DiscriminatorOptions& options,
                               const Eigen::VectorXd* warm_start) {
  const Index p = phi.cols();
  if (labels.size() != phi.rows() || weights.size() != phi.rows()) {
    throw DimensionError("discriminator: labels and weights must match the example count");
  }
  InnerSolve out;
  out.beta = Eigen::VectorXd::Zero(p);
  if (warm_start != nullptr && warm_start->size() == p && warm_start->allFinite()) out.beta = *warm_start;
  const double total = weights.sum();
  const Eigen::VectorXd mask = penalty_mask(p);
  double current = penalized(phi, out.beta, labels, weights, options.ridge, &out.utility);
  out.trace.push_back(current);

  for (int iter = 0; iter < options.max_newton; ++iter) {
    const Eigen::VectorXd eta = phi * out.beta;
    Eigen::VectorXd residual(eta.size());
    Eigen::VectorXd curvature(eta.size());
    for (Index i = 0; i < eta.size(); ++i) {
      const double prob = sigmoid(eta[i]);
      residual[i] = weights[i] * (labels[i] - prob) / total;
      curvature[i] = weights[i] * prob * (1.0 - prob) / total;
    }
    const Eigen::VectorXd grad =
        phi.transpose() * residual - options.ridge * mask.cwiseProduct(out.beta);
    Eigen::MatrixXd hessian = Eigen::MatrixXd::Zero(p, p);
    const Eigen::MatrixXd scaled = phi.array().colwise() * curvature.array().sqrt();
    hessian.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
    hessian = hessian.selfadjointView<Eigen::Lower>();
    hessian.diagonal() += options.ridge * mask + Eigen::VectorXd::Constant(p, 1e-12);
    const Eigen::VectorXd delta = hessian.ldlt().solve(grad);
    if (!delta.allFinite()) throw NumericalError("discriminator: Newton direction is not finite");
    const double decrement = grad.dot(delta);
    if (decrement < options.tolerance) {
      out.converged = true;
      break;
    }
    double t = 1.0;
    bool moved = false;
    while (t > 1e-10) {
      const Eigen::VectorXd next = out.beta + t * delta;
      double u = 0.0;
      const double value = penalized(phi, next, labels, weights, options.ridge, &u);
      if (value >= current) {
        out.beta = next;
        current = value;
        out.utility = u;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      out.converged = true;
      break;
    }
    out.trace.push_back(current);
    ++out.iterations;
  }
  if (!std::isfinite(current)) throw NumericalError("discriminator: utility is not finite");
  out.penalized_utility = current;
  return out;
}

AffineAggregator first_moment_fit(const SimulationTable& table, const PosteriorEnsemble& ensemble,
                                  std::span<const Index> rows) {
  check_compatible(table, ensemble);
  const Index K = ensemble.n_inferences();
  const Index d = ensemble.dim();
  const Index n = static_cast<Index>(rows.size());
  if (n < 1) throw ConfigurationError("first-moment fit needs at least one row");
  Eigen::MatrixXd design(n, 1 + K * d);
  Eigen::MatrixXd target(n, d);
  for (Index i = 0; i < n; ++i) {
    const Index row = rows[static_cast<std::size_t>(i)];
    design(i, 0) = 1.0;
    for (Index k = 0; k < K; ++k) {
      design.block(i, 1 + k * d, 1, d) = ensemble.draws(k, row).colwise().mean();
    }
    target.row(i) = table.theta.row(row);
  }
  const Eigen::MatrixXd coef = design.completeOrthogonalDecomposition().solve(target);
  AffineAggregator agg;
  agg.offset = coef.row(0).transpose();
  for (Index k = 0; k < K; ++k) agg.maps.push_back(coef.middleRows(1 + k * d, d).transpose());
  return agg;
}

SampleStackingFit fit_sample_stacking(const SimulationTable& table,
                                      const PosteriorEnsemble& ensemble,
                                      const SampleStackingOptions& options) {
  check_compatible(table, ensemble);
  if (options.max_rounds < 0 || !(options.step > 0.0) || options.patience < 1) {
    throw ConfigurationError("sample stacking options out of range");
  }
  const std::vector<Index> rows = table.rows(options.fit_split);
  if (rows.empty()) {
    throw ConfigurationError("no rows labeled '" + std::string(to_string(options.fit_split)) +
                             "' to fit sample stacking on");
  }
  const Index K = ensemble.n_inferences();
  const Index d = ensemble.dim();
  const Index dy = table.data_dim();
  const Index S = ensemble.n_draws();
  const Index n = static_cast<Index>(rows.size());

  AffineAggregator start = options.initial ? *options.initial
                           : options.moment_prefit ? first_moment_fit(table, ensemble, rows)
                                                   : AffineAggregator::averaging(K, d);
  check_aggregator(start, ensemble);
  if (!options.initial && options.init_jitter > 0.0) {
    std::mt19937_64 rng(options.seed ^ 0xd1b54a32d192ed03ULL);
    std::normal_distribution<double> normal(0.0, options.init_jitter);
    for (auto& m : start.maps) m = m.unaryExpr([&](double v) { return v + normal(rng); });
  }

  // Positive examples never change; draws are stacked once per inference.
  Eigen::MatrixXd positives(n, d + dy);
  std::vector<Eigen::MatrixXd> stacked(static_cast<std::size_t>(K), Eigen::MatrixXd(n * S, d));
  Eigen::MatrixXd y_neg(n * S, dy);
  for (Index i = 0; i < n; ++i) {
    const Index row = rows[static_cast<std::size_t>(i)];
    positives.row(i) << table.theta.row(row), table.y.row(row);
    y_neg.middleRows(i * S, S) = table.y.row(row).replicate(S, 1);
    for (Index k = 0; k < K; ++k) {
      stacked[static_cast<std::size_t>(k)].middleRows(i * S, S) = ensemble.draws(k, row);
    }
  }
  const FeatureExpansion features = FeatureExpansion::fit(
      positives, options.discriminator.n_features, options.seed, options.discriminator.bandwidth);
  const Index p = features.n_outputs();
  const ClassWeights cw = ClassWeights::for_draws(S);
  Eigen::MatrixXd phi(n * (S + 1), p);
  phi.topRows(n) = features.transform(positives);
  Eigen::VectorXd labels = Eigen::VectorXd::Zero(n * (S + 1));
  labels.head(n).setOnes();
  Eigen::VectorXd weights = Eigen::VectorXd::Constant(n * (S + 1), cw.negative);
  weights.head(n).setConstant(cw.positive);
  const double total_weight = weights.sum();

  struct State {
    Eigen::VectorXd params;
    Eigen::MatrixXd negatives;  // n*S x (d + dy)
    InnerSolve inner;
  };
  int round = 0;
  auto solve = [&](const Eigen::VectorXd& params, const Eigen::VectorXd* warm) {
    const AffineAggregator agg = unflatten(params, K, d);
    State st;
    st.params = params;
    st.negatives.resize(n * S, d + dy);
    Eigen::MatrixXd theta_star = agg.offset.transpose().replicate(n * S, 1);
    for (Index k = 0; k < K; ++k) {
      theta_star.noalias() += stacked[static_cast<std::size_t>(k)] * agg.maps[static_cast<std::size_t>(k)].transpose();
    }
    st.negatives << theta_star, y_neg;
    phi.bottomRows(n * S) = features.transform(st.negatives);
    try {
      st.inner = train_discriminator(phi, labels, weights, options.discriminator, warm);
    } catch (const NumericalError& err) {
      throw NumericalError(std::string(err.what()) + " at outer round " + std::to_string(round));
    }
    return st;
  };
  auto outer_gradient = [&](const State& st) {
    const Eigen::VectorXd eta = phi.bottomRows(n * S) * st.inner.beta;
    const Eigen::MatrixXd slope = features.input_gradient(st.negatives, st.inner.beta, d);
    Eigen::MatrixXd g(n * S, d);
    for (Index i = 0; i < n * S; ++i) {
      g.row(i) = -cw.negative / total_weight * sigmoid(eta[i]) * slope.row(i);
    }
    Eigen::VectorXd flat(d + K * d * d);
    flat.head(d) = options.freeze_offset ? Eigen::VectorXd::Zero(d)
                                         : Eigen::VectorXd(g.colwise().sum().transpose());
    for (Index k = 0; k < K; ++k) {
      const Eigen::MatrixXd gk = options.freeze_maps
                                     ? Eigen::MatrixXd::Zero(d, d)
                                     : Eigen::MatrixXd(g.transpose() * stacked[static_cast<std::size_t>(k)]);
      flat.segment(d + k * d * d, d * d) = Eigen::Map<const Eigen::VectorXd>(gk.data(), d * d);
    }
    return flat;
  };

  State current = solve(flatten(start), nullptr);
  SampleStackingFit fit;
  fit.utility_trace.push_back(current.inner.utility);
  fit.objective_trace.push_back(current.inner.penalized_utility);
  Eigen::VectorXd grad = outer_gradient(current);
  double lr = options.step;
  int streak = 0;
  const double chance = -std::log(2.0);
  const bool frozen = options.freeze_offset && options.freeze_maps;

  for (round = 0; round < options.max_rounds && !frozen; ++round) {
    const double norm = grad.norm();
    if (!(norm > 0.0)) {
      fit.converged = true;
      break;
    }
    const Eigen::VectorXd proposal = current.params - (lr / norm) * grad;
    State next = solve(proposal, &current.inner.beta);
    if (next.inner.penalized_utility <= current.inner.penalized_utility) {
      current = std::move(next);
      grad = outer_gradient(current);
      lr = std::min(options.step, 1.5 * lr);
      fit.utility_trace.push_back(current.inner.utility);
      fit.objective_trace.push_back(current.inner.penalized_utility);
      streak = std::abs(current.inner.utility - chance) < options.utility_tolerance ? streak + 1 : 0;
      if (streak >= options.patience) {
        fit.converged = true;
        ++round;
        break;
      }
    } else {
      lr *= 0.5;
      phi.bottomRows(n * S) = features.transform(current.negatives);
      if (lr < options.min_step) {
        fit.converged = true;
        ++round;
        break;
      }
    }
  }
  if (frozen) fit.converged = true;
  fit.rounds = round;
  fit.aggregator = unflatten(current.params, K, d);
  fit.discriminator = Discriminator{features, current.inner.beta};
  fit.utility = current.inner.utility;
  if (!fit.converged) fit.warnings.push_back("sample stacking stopped at the round limit");
  if (!current.inner.converged) fit.warnings.push_back("final discriminator solve did not converge");
  return fit;
}

DiscriminativeGap discriminative_gap(const SimulationTable& table,
                                     const std::vector<Eigen::MatrixXd>& draws,
                                     std::span<const Index> rows, std::uint64_t seed,
                                     const DiscriminatorOptions& options) {
  if (rows.size() < 50) {
    throw ParameterError("discriminative gap needs at least 50 rows, got " + std::to_string(rows.size()));
  }
  if (draws.size() != rows.size()) throw DimensionError("discriminative gap: one draw block per row");
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t half = rows.size() / 2;
  std::vector<Index> train_rows, test_rows;
  std::vector<Eigen::MatrixXd> train_draws, test_draws;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& r = i < half ? train_rows : test_rows;
    auto& dr = i < half ? train_draws : test_draws;
    r.push_back(rows[order[i]]);
    dr.push_back(draws[order[i]]);
  }
  const ClassificationSet train = build_classification_set(table, train_draws, train_rows);
  const ClassificationSet test = build_classification_set(table, test_draws, test_rows);
  const FeatureExpansion features = FeatureExpansion::fit(
      train.inputs(Eigen::seqN(0, train.n_rows, train.n_draws + 1), Eigen::all),
      options.n_features, seed ^ 0x9e3779b97f4a7c15ULL, options.bandwidth);
  const InnerSolve inner =
      train_discriminator(features.transform(train.inputs), train.labels, train.weights, options);

  DiscriminativeGap out;
  out.n_train_rows = train.n_rows;
  out.n_test_rows = test.n_rows;
  out.linear_only = options.n_features == 0;
  if (out.linear_only) {
    out.diagnostics.push_back(
        "linear features only: the discriminator cannot see second-moment mismatch");
  }
  if (!inner.converged) out.diagnostics.push_back("discriminator solve did not converge");
  const Eigen::MatrixXd phi = features.transform(test.inputs);
  const Eigen::VectorXd eta = phi * inner.beta;
  const Index block = test.n_draws + 1;
  Eigen::VectorXd per_row = Eigen::VectorXd::Zero(test.n_rows);
  double tp = 0.0, tn = 0.0, pos = 0.0, neg = 0.0;
  for (Index i = 0; i < eta.size(); ++i) {
    const bool positive = test.labels[i] > 0.5;
    const double ll = positive ? -softplus(-eta[i]) : -softplus(eta[i]);
    per_row[i / block] += test.weights[i] * ll / static_cast<double>(block);
    const bool predicted = eta[i] >= 0.0;
    if (positive) {
      pos += 1.0;
      tp += predicted ? 1.0 : 0.0;
    } else {
      neg += 1.0;
      tn += predicted ? 0.0 : 1.0;
    }
  }
  out.utility = per_row.mean();
  const double spread = (per_row.array() - out.utility).square().sum() /
                        static_cast<double>(std::max<Index>(test.n_rows - 1, 1));
  out.utility_se = std::sqrt(spread / static_cast<double>(test.n_rows));
  out.balanced_accuracy = 0.5 * (tp / pos + tn / neg);
  return out;
}

}  // namespace sbstack
