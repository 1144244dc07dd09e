#pragma once

// Drawing from stacked posteriors and scoring any fit, or a single raw
// inference, on the test rows.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sbstack/core.hpp"
#include "sbstack/interval.hpp"
#include "sbstack/mixture.hpp"
#include "sbstack/sample.hpp"

namespace sbstack {

struct QmcSample {
  Eigen::MatrixXd draws;           // S_out x d, grouped by inference
  std::vector<Index> counts;       // draws taken from each inference
  std::vector<std::string> warnings;
};

/// Floor allocation floor(S_out w_k) per inference, then the leftover draws
/// go to distinct inferences picked with probability proportional to the
/// residual w_k - floor(S_out w_k) / S_out. Draws within a pool are taken
/// without replacement.
QmcSample qmc_sample_mixture(const SimplexWeights& weights,
                             std::span<const Eigen::MatrixXd> pools, Index n_out,
                             std::mt19937_64& rng);
QmcSample qmc_sample_mixture(const SimplexWeights& weights,
                             std::span<const Eigen::MatrixXd> pools, Index n_out,
                             std::uint64_t seed);

/// Just the per-inference counts of qmc_sample_mixture.
std::vector<Index> qmc_allocation(const SimplexWeights& weights, Index n_out, std::mt19937_64& rng,
                                  std::vector<std::string>* warnings = nullptr);

/// One S_out x d block per requested row; local weights are evaluated per row.
std::vector<Eigen::MatrixXd> sample_mixture_rows(const MixtureFit& fit, const SimulationTable& table,
                                                 const PosteriorEnsemble& ensemble,
                                                 std::span<const Index> rows, Index n_out,
                                                 std::uint64_t seed,
                                                 std::vector<std::string>* warnings = nullptr);

/// Counts per equal-width bin of [0, 1]; bin b holds (b/B, (b+1)/B], and 0
/// lands in the first bin.
std::vector<Index> rank_histogram(std::span<const double> ranks, Index bins);

struct RawInference {
  Index k = 0;
};

using StackedPosterior = std::variant<RawInference, MixtureFit, IntervalFit, SampleStackingFit>;

template <typename T>
struct Metric {
  std::optional<T> value;
  std::string absent_reason;

  bool present() const { return value.has_value(); }
  static Metric absent(std::string reason) { return Metric{std::nullopt, std::move(reason)}; }
  static Metric of(T v) { return Metric{std::move(v), {}}; }
};

struct EvaluationOptions {
  double alpha = 0.1;
  Index bins = 20;
  std::uint64_t seed = 0;
  Split split = Split::Test;
  Index n_draws = 0;  // QMC draws per row for mixture fits; 0 uses S
};

struct EvaluationReport {
  std::string label;
  Index n_test = 0;
  double alpha = 0.1;
  Metric<double> expected_log_pred_density;
  Metric<Eigen::VectorXd> coverage_error;  // per dimension
  Metric<double> coverage_error_average;
  Metric<double> moment_error;
  Metric<Eigen::VectorXd> rank_cvm;  // per dimension
  Metric<double> rank_cvm_sum;
  Metric<std::vector<std::vector<Index>>> rank_histogram;  // per dimension
  std::vector<std::string> warnings;
};

std::string describe(const StackedPosterior& posterior);

EvaluationReport evaluate(const StackedPosterior& posterior, const SimulationTable& table,
                          const PosteriorEnsemble& ensemble, const EvaluationOptions& options = {});

struct ComparisonRow {
  std::string metric;
  std::optional<double> best;  // best single inference for this metric
  std::optional<double> uniform;
  std::optional<double> stacked;
  bool higher_is_better = false;
};

struct Comparison {
  std::vector<EvaluationReport> individual;  // one per inference
  EvaluationReport uniform;
  EvaluationReport stacked;
  std::vector<ComparisonRow> rows;
};

/// Scores every inference, the uniform mixture, and the fit on the same rows.
Comparison compare(const StackedPosterior& stacked, const SimulationTable& table,
                   const PosteriorEnsemble& ensemble, const EvaluationOptions& options = {});

/// Scalar metrics of a report under stable names ("elpd", "coverage_error",
/// "coverage_error[j]", "moment_error", "rank_cvm", "rank_cvm[j]").
std::vector<std::pair<std::string, std::optional<double>>> scalar_metrics(
    const EvaluationReport& report);

}  // namespace sbstack
