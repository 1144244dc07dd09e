#include "sbstack/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sbstack/scores.hpp"

namespace sbstack {

namespace {

void check_pools(const SimplexWeights& weights, std::span<const Eigen::MatrixXd> pools,
                 Index n_out) {
  if (static_cast<Index>(pools.size()) != weights.size()) {
    std::ostringstream msg;
    msg << weights.size() << " weights for " << pools.size() << " draw pools";
    throw DimensionError(msg.str());
  }
  if (n_out < 0) throw ParameterError("number of output draws is negative");
  for (const auto& pool : pools) {
    if (pool.rows() < n_out) {
      std::ostringstream msg;
      msg << "requested " << n_out << " draws but a pool holds only " << pool.rows();
      throw CapacityError(msg.str());
    }
    if (pool.cols() != pools.front().cols()) throw DimensionError("draw pools differ in dimension");
  }
}

// Summaries of one draw block per evaluated row.
struct DrawSummary {
  Eigen::MatrixXd lo, hi, means, ranks;  // rows x d
  std::vector<Eigen::MatrixXd> covariances;
};

DrawSummary summarize(const std::vector<Eigen::MatrixXd>& blocks, const SimulationTable& table,
                      std::span<const Index> rows, double alpha) {
  const Index n = static_cast<Index>(rows.size());
  const Index d = table.dim();
  DrawSummary out;
  out.lo.resize(n, d);
  out.hi.resize(n, d);
  out.means.resize(n, d);
  out.ranks.resize(n, d);
  out.covariances.reserve(rows.size());
  std::vector<double> column;
  for (Index i = 0; i < n; ++i) {
    const Eigen::MatrixXd& draws = blocks[static_cast<std::size_t>(i)];
    const Index S = draws.rows();
    const Index row = rows[static_cast<std::size_t>(i)];
    column.resize(static_cast<std::size_t>(S));
    for (Index j = 0; j < d; ++j) {
      Index below = 0;
      for (Index s = 0; s < S; ++s) {
        column[static_cast<std::size_t>(s)] = draws(s, j);
        if (draws(s, j) <= table.theta(row, j)) ++below;
      }
      std::sort(column.begin(), column.end());
      const std::span<const double> sorted(column);
      out.lo(i, j) = sorted_quantile(sorted, alpha / 2.0);
      out.hi(i, j) = sorted_quantile(sorted, 1.0 - alpha / 2.0);
      out.ranks(i, j) = static_cast<double>(below) / static_cast<double>(S);
    }
    const Eigen::RowVectorXd mean = draws.colwise().mean();
    const Eigen::MatrixXd centered = draws.rowwise() - mean;
    out.means.row(i) = mean;
    out.covariances.push_back(centered.transpose() * centered / static_cast<double>(S));
  }
  return out;
}

double mean_moment_error(const Eigen::MatrixXd& means, const std::vector<Eigen::MatrixXd>& covs,
                         const SimulationTable& table, std::span<const Index> rows) {
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Eigen::MatrixXd cov = clamp_covariance(covs[i]);
    total += moment_score(means.row(static_cast<Index>(i)).transpose(), cov,
                          table.theta.row(rows[i]).transpose());
  }
  return total / static_cast<double>(rows.size());
}

void fill_ranks(EvaluationReport& report, const Eigen::MatrixXd& ranks, Index bins) {
  const Index d = ranks.cols();
  Eigen::VectorXd per_dim(d);
  std::vector<std::vector<Index>> hist;
  std::vector<double> column(static_cast<std::size_t>(ranks.rows()));
  for (Index j = 0; j < d; ++j) {
    for (Index i = 0; i < ranks.rows(); ++i) column[static_cast<std::size_t>(i)] = ranks(i, j);
    per_dim[j] = rank_cvm_distance(column);
    hist.push_back(rank_histogram(column, bins));
  }
  report.rank_cvm_sum = Metric<double>::of(per_dim.sum());
  report.rank_cvm = Metric<Eigen::VectorXd>::of(std::move(per_dim));
  report.rank_histogram = Metric<std::vector<std::vector<Index>>>::of(std::move(hist));
}

void fill_coverage(EvaluationReport& report, const StackedIntervals& intervals,
                   const SimulationTable& table, std::span<const Index> rows, double alpha) {
  const CoverageError cov = coverage_error(intervals, table, rows, alpha);
  report.coverage_error = Metric<Eigen::VectorXd>::of(cov.error);
  report.coverage_error_average = Metric<double>::of(cov.average);
}

void fill_elpd(EvaluationReport& report, const Eigen::MatrixXd& row_weights,
               const PosteriorEnsemble& ensemble, std::span<const Index> rows) {
  if (!ensemble.has_log_q()) {
    report.expected_log_pred_density = Metric<double>::absent("ensemble has no logq stream");
    return;
  }
  const Eigen::MatrixXd& log_q = ensemble.log_q();
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Eigen::VectorXd lq = log_q.col(rows[i]);
    const double peak = lq.maxCoeff();
    if (!std::isfinite(peak)) {
      total = -std::numeric_limits<double>::infinity();
      break;
    }
    double sum = 0.0;
    for (Index k = 0; k < lq.size(); ++k) {
      const double w = row_weights(static_cast<Index>(i), k);
      if (w > 0.0) sum += w * std::exp(lq[k] - peak);
    }
    total += peak + std::log(sum);
  }
  if (!std::isfinite(total)) {
    report.expected_log_pred_density =
        Metric<double>::absent("log density is -inf on at least one test row");
    return;
  }
  report.expected_log_pred_density = Metric<double>::of(total / static_cast<double>(rows.size()));
}

void mark_absent_density(EvaluationReport& report, const std::string& why) {
  report.expected_log_pred_density = Metric<double>::absent(why);
}

void evaluate_raw(EvaluationReport& report, Index k, const SimulationTable& table,
                  const PosteriorEnsemble& ensemble, std::span<const Index> rows,
                  const EvaluationOptions& options) {
  if (k < 0 || k >= ensemble.n_inferences()) {
    throw DimensionError("inference index " + std::to_string(k) + " out of range");
  }
  std::vector<Eigen::MatrixXd> blocks;
  blocks.reserve(rows.size());
  for (Index n : rows) blocks.push_back(ensemble.draws(k, n));
  const DrawSummary s = summarize(blocks, table, rows, options.alpha);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<Index>(rows.size()), ensemble.n_inferences());
  w.col(k).setOnes();
  fill_elpd(report, w, ensemble, rows);
  fill_coverage(report, {s.lo, s.hi}, table, rows, options.alpha);
  report.moment_error = Metric<double>::of(mean_moment_error(s.means, s.covariances, table, rows));
  fill_ranks(report, s.ranks, options.bins);
}

void evaluate_mixture(EvaluationReport& report, const MixtureFit& fit, const SimulationTable& table,
                      const PosteriorEnsemble& ensemble, std::span<const Index> rows,
                      const EvaluationOptions& options) {
  if (fit.n_inferences() != ensemble.n_inferences()) {
    std::ostringstream msg;
    msg << "fit has " << fit.n_inferences() << " inferences, ensemble has "
        << ensemble.n_inferences();
    throw DimensionError(msg.str());
  }
  const Eigen::MatrixXd w = fit.row_weights(table, rows);
  fill_elpd(report, w, ensemble, rows);

  const Index n_out = options.n_draws > 0 ? options.n_draws : ensemble.n_draws();
  const std::vector<Eigen::MatrixXd> blocks =
      sample_mixture_rows(fit, table, ensemble, rows, n_out, options.seed, &report.warnings);
  const DrawSummary s = summarize(blocks, table, rows, options.alpha);
  fill_coverage(report, {s.lo, s.hi}, table, rows, options.alpha);

  MomentSummary moments;
  moments.n_sims = ensemble.n_sims();
  const Index K = ensemble.n_inferences();
  const Index S = ensemble.n_draws();
  moments.means.assign(static_cast<std::size_t>(K), Eigen::MatrixXd::Zero(ensemble.n_sims(), ensemble.dim()));
  moments.covariances.assign(static_cast<std::size_t>(K * ensemble.n_sims()), Eigen::MatrixXd());
  RankTable ranks;
  ranks.n_draws = S;
  ranks.ranks.assign(static_cast<std::size_t>(K), Eigen::MatrixXd::Zero(ensemble.n_sims(), ensemble.dim()));
  for (Index k = 0; k < K; ++k) {
    for (Index n : rows) {
      const Eigen::MatrixXd& draws = ensemble.draws(k, n);
      const Eigen::RowVectorXd mean = draws.colwise().mean();
      const Eigen::MatrixXd centered = draws.rowwise() - mean;
      moments.means[static_cast<std::size_t>(k)].row(n) = mean;
      moments.covariances[static_cast<std::size_t>(k * ensemble.n_sims() + n)] =
          centered.transpose() * centered / static_cast<double>(S);
      for (Index j = 0; j < ensemble.dim(); ++j) {
        ranks.ranks[static_cast<std::size_t>(k)](n, j) =
            static_cast<double>((draws.col(j).array() <= table.theta(n, j)).count()) /
            static_cast<double>(S);
      }
    }
  }
  const MixtureMoments mix = mixture_moments(w, moments, rows);
  report.moment_error = Metric<double>::of(mean_moment_error(mix.means, mix.covariances, table, rows));
  fill_ranks(report, mixed_ranks(w, ranks, rows), options.bins);
}

void evaluate_interval(EvaluationReport& report, const IntervalFit& fit, const SimulationTable& table,
                       const PosteriorEnsemble& ensemble, std::span<const Index> rows,
                       const EvaluationOptions& options) {
  if (std::abs(fit.alpha - options.alpha) > 1e-12) {
    std::ostringstream msg;
    msg << "coverage is scored at the fit's alpha " << fit.alpha << ", not " << options.alpha;
    report.warnings.push_back(msg.str());
  }
  report.alpha = fit.alpha;
  const IntervalTable intervals = compute_intervals(ensemble, fit.alpha);
  fill_coverage(report, stacked_intervals(fit, intervals, rows), table, rows, fit.alpha);
  mark_absent_density(report, "interval fits define endpoints only, not a density");
  report.moment_error = Metric<double>::absent("interval fits define endpoints only, not moments");
  const std::string why = "interval fits define endpoints only, not a distribution";
  report.rank_cvm = Metric<Eigen::VectorXd>::absent(why);
  report.rank_cvm_sum = Metric<double>::absent(why);
  report.rank_histogram = Metric<std::vector<std::vector<Index>>>::absent(why);
}

void evaluate_sample(EvaluationReport& report, const SampleStackingFit& fit,
                     const SimulationTable& table, const PosteriorEnsemble& ensemble,
                     std::span<const Index> rows, const EvaluationOptions& options) {
  const std::vector<Eigen::MatrixXd> blocks = aggregate_draws(fit.aggregator, ensemble, rows);
  const DrawSummary s = summarize(blocks, table, rows, options.alpha);
  mark_absent_density(report, "aggregated draws have no tractable density");
  fill_coverage(report, {s.lo, s.hi}, table, rows, options.alpha);
  report.moment_error = Metric<double>::of(mean_moment_error(s.means, s.covariances, table, rows));
  fill_ranks(report, s.ranks, options.bins);
}

}  // namespace

std::vector<Index> qmc_allocation(const SimplexWeights& weights, Index n_out, std::mt19937_64& rng,
                                  std::vector<std::string>* warnings) {
  const Index K = weights.size();
  const double total = static_cast<double>(n_out);
  std::vector<Index> counts(static_cast<std::size_t>(K));
  std::vector<double> residual(static_cast<std::size_t>(K));
  Index allocated = 0;
  for (Index k = 0; k < K; ++k) {
    // Guard against w_k S_out landing a rounding error below an integer.
    const double target = weights[k] * total;
    auto floor_k = static_cast<Index>(std::floor(target + 1e-9));
    floor_k = std::clamp<Index>(floor_k, 0, n_out - allocated);
    counts[static_cast<std::size_t>(k)] = floor_k;
    allocated += floor_k;
    residual[static_cast<std::size_t>(k)] =
        std::max(0.0, weights[k] - static_cast<double>(floor_k) / total);
  }
  Index leftover = n_out - allocated;
  if (leftover <= 0) return counts;

  std::vector<bool> taken(static_cast<std::size_t>(K), false);
  bool warned = false;
  while (leftover > 0) {
    double mass = 0.0;
    for (Index k = 0; k < K; ++k) {
      if (!taken[static_cast<std::size_t>(k)]) mass += residual[static_cast<std::size_t>(k)];
    }
    Index pick = -1;
    if (mass > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, mass)(rng);
      for (Index k = 0; k < K; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        if (taken[kk] || residual[kk] <= 0.0) continue;
        pick = k;
        u -= residual[kk];
        if (u < 0.0) break;
      }
    } else {
      if (!warned && warnings != nullptr) {
        warnings->push_back("residual weights are all zero; leftover draws use a uniform pick");
      }
      warned = true;
      std::vector<Index> open;
      for (Index k = 0; k < K; ++k) {
        if (!taken[static_cast<std::size_t>(k)]) open.push_back(k);
      }
      if (open.empty()) {
        std::fill(taken.begin(), taken.end(), false);
        for (Index k = 0; k < K; ++k) open.push_back(k);
      }
      std::uniform_int_distribution<std::size_t> pick_open(0, open.size() - 1);
      pick = open[pick_open(rng)];
    }
    taken[static_cast<std::size_t>(pick)] = true;
    ++counts[static_cast<std::size_t>(pick)];
    --leftover;
  }
  return counts;
}

QmcSample qmc_sample_mixture(const SimplexWeights& weights,
                             std::span<const Eigen::MatrixXd> pools, Index n_out,
                             std::mt19937_64& rng) {
  check_pools(weights, pools, n_out);
  QmcSample out;
  out.counts = qmc_allocation(weights, n_out, rng, &out.warnings);
  const Index d = pools.empty() ? 0 : pools.front().cols();
  out.draws.resize(n_out, d);
  Index next = 0;
  std::vector<Index> order;
  for (std::size_t k = 0; k < pools.size(); ++k) {
    const Index take = out.counts[k];
    if (take == 0) continue;
    const Index S = pools[k].rows();
    order.resize(static_cast<std::size_t>(S));
    std::iota(order.begin(), order.end(), Index{0});
    // Partial Fisher-Yates: the first `take` slots are a uniform subset.
    for (Index s = 0; s < take; ++s) {
      std::uniform_int_distribution<Index> pick(s, S - 1);
      std::swap(order[static_cast<std::size_t>(s)], order[static_cast<std::size_t>(pick(rng))]);
      out.draws.row(next++) = pools[k].row(order[static_cast<std::size_t>(s)]);
    }
  }
  return out;
}

QmcSample qmc_sample_mixture(const SimplexWeights& weights,
                             std::span<const Eigen::MatrixXd> pools, Index n_out,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return qmc_sample_mixture(weights, pools, n_out, rng);
}

std::vector<Eigen::MatrixXd> sample_mixture_rows(const MixtureFit& fit, const SimulationTable& table,
                                                 const PosteriorEnsemble& ensemble,
                                                 std::span<const Index> rows, Index n_out,
                                                 std::uint64_t seed,
                                                 std::vector<std::string>* warnings) {
  check_compatible(table, ensemble);
  if (n_out > ensemble.n_draws()) {
    std::ostringstream msg;
    msg << "requested " << n_out << " draws per row but inferences hold only "
        << ensemble.n_draws();
    throw CapacityError(msg.str());
  }
  const Eigen::MatrixXd w = fit.row_weights(table, rows);
  const Index K = ensemble.n_inferences();
  std::vector<Eigen::MatrixXd> out;
  out.reserve(rows.size());
  std::vector<Eigen::MatrixXd> pools(static_cast<std::size_t>(K));
  bool warned = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index k = 0; k < K; ++k) pools[static_cast<std::size_t>(k)] = ensemble.draws(k, rows[i]);
    std::mt19937_64 rng = row_stream(seed, static_cast<std::uint64_t>(rows[i]));
    QmcSample sample = qmc_sample_mixture(
        SimplexWeights(w.row(static_cast<Index>(i)).transpose()), pools, n_out, rng);
    if (!sample.warnings.empty() && !warned && warnings != nullptr) {
      warnings->push_back(sample.warnings.front());
      warned = true;
    }
    out.push_back(std::move(sample.draws));
  }
  return out;
}

std::vector<Index> rank_histogram(std::span<const double> ranks, Index bins) {
  if (bins < 2) throw ParameterError("rank histogram needs at least 2 bins");
  std::vector<Index> counts(static_cast<std::size_t>(bins), 0);
  const double B = static_cast<double>(bins);
  for (double r : ranks) {
    const auto b = static_cast<Index>(std::ceil(r * B)) - 1;
    ++counts[static_cast<std::size_t>(std::clamp<Index>(b, 0, bins - 1))];
  }
  return counts;
}

std::string describe(const StackedPosterior& posterior) {
  if (const auto* raw = std::get_if<RawInference>(&posterior)) {
    return "inference " + std::to_string(raw->k);
  }
  if (const auto* mix = std::get_if<MixtureFit>(&posterior)) {
    return mix->is_local() ? "local mixture" : "mixture";
  }
  if (std::holds_alternative<IntervalFit>(posterior)) return "interval";
  return "sample";
}

EvaluationReport evaluate(const StackedPosterior& posterior, const SimulationTable& table,
                          const PosteriorEnsemble& ensemble, const EvaluationOptions& options) {
  check_compatible(table, ensemble);
  if (!(options.alpha > 0.0 && options.alpha < 1.0)) {
    throw ParameterError("interval level alpha must lie in (0, 1)");
  }
  if (options.bins < 2) throw ParameterError("rank histogram needs at least 2 bins");
  const std::vector<Index> rows = table.rows(options.split);
  if (rows.empty()) {
    throw EvaluationError("no rows labeled '" + std::string(to_string(options.split)) +
                          "' to evaluate on");
  }
  EvaluationReport report;
  report.label = describe(posterior);
  report.n_test = static_cast<Index>(rows.size());
  report.alpha = options.alpha;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, RawInference>) {
          evaluate_raw(report, p.k, table, ensemble, rows, options);
        } else if constexpr (std::is_same_v<T, MixtureFit>) {
          evaluate_mixture(report, p, table, ensemble, rows, options);
        } else if constexpr (std::is_same_v<T, IntervalFit>) {
          evaluate_interval(report, p, table, ensemble, rows, options);
        } else {
          evaluate_sample(report, p, table, ensemble, rows, options);
        }
      },
      posterior);
  return report;
}

std::vector<std::pair<std::string, std::optional<double>>> scalar_metrics(
    const EvaluationReport& report) {
  std::vector<std::pair<std::string, std::optional<double>>> out;
  out.emplace_back("elpd", report.expected_log_pred_density.value);
  out.emplace_back("coverage_error", report.coverage_error_average.value);
  out.emplace_back("moment_error", report.moment_error.value);
  out.emplace_back("rank_cvm", report.rank_cvm_sum.value);
  if (report.coverage_error.present()) {
    const Eigen::VectorXd& e = *report.coverage_error.value;
    for (Index j = 0; j < e.size(); ++j) {
      out.emplace_back("coverage_error[" + std::to_string(j) + "]", e[j]);
    }
  }
  if (report.rank_cvm.present()) {
    const Eigen::VectorXd& r = *report.rank_cvm.value;
    for (Index j = 0; j < r.size(); ++j) out.emplace_back("rank_cvm[" + std::to_string(j) + "]", r[j]);
  }
  return out;
}

Comparison compare(const StackedPosterior& stacked, const SimulationTable& table,
                   const PosteriorEnsemble& ensemble, const EvaluationOptions& options) {
  EvaluationOptions opts = options;
  if (const auto* fit = std::get_if<IntervalFit>(&stacked)) opts.alpha = fit->alpha;

  Comparison out;
  const Index K = ensemble.n_inferences();
  for (Index k = 0; k < K; ++k) out.individual.push_back(evaluate(RawInference{k}, table, ensemble, opts));
  out.uniform = evaluate(MixtureFit(SimplexWeights::uniform(K), HybridSpec()), table, ensemble, opts);
  out.uniform.label = "uniform";
  out.stacked = evaluate(stacked, table, ensemble, opts);

  const auto stacked_metrics = scalar_metrics(out.stacked);
  const auto uniform_metrics = scalar_metrics(out.uniform);
  std::vector<std::vector<std::pair<std::string, std::optional<double>>>> singles;
  for (const auto& r : out.individual) singles.push_back(scalar_metrics(r));

  auto lookup = [](const auto& metrics, const std::string& name) -> std::optional<double> {
    for (const auto& [key, value] : metrics) {
      if (key == name) return value;
    }
    return std::nullopt;
  };
  // Row set follows the individual reports, which carry every metric the
  // ensemble supports.
  for (const auto& [name, unused] : singles.front()) {
    ComparisonRow row;
    row.metric = name;
    row.higher_is_better = name == "elpd";
    for (const auto& single : singles) {
      const auto v = lookup(single, name);
      if (!v) continue;
      if (!row.best || (row.higher_is_better ? *v > *row.best : *v < *row.best)) row.best = v;
    }
    row.uniform = lookup(uniform_metrics, name);
    row.stacked = lookup(stacked_metrics, name);
    out.rows.push_back(std::move(row));
  }
  return out;
}

}  // namespace sbstack
