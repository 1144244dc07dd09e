#pragma once

// JSON-lines data files, fit artifacts, run configuration, and the batch
// commands behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbstack/core.hpp"
#include "sbstack/evaluate.hpp"
#include "sbstack/interval.hpp"
#include "sbstack/mixture.hpp"
#include "sbstack/sample.hpp"

namespace sbstack {

using Json = nlohmann::json;
namespace fs = std::filesystem;

// Table file: one record per row {n, theta, y, split}. The split field may be
// left out on every row, in which case splits are assigned from fractions.
SimulationTable load_table(const fs::path& path, bool* had_splits = nullptr);
void save_table(const SimulationTable& table, const fs::path& path);

// Draws file: one record per (k, n) {k, n, draws: S rows of d reals}.
// Log-density file: one record per (k, n) {k, n, logq}, null for -inf.
PosteriorEnsemble load_ensemble(const fs::path& draws_path,
                                const std::optional<fs::path>& logq_path = std::nullopt);
void save_ensemble(const PosteriorEnsemble& ensemble, const fs::path& draws_path,
                   const std::optional<fs::path>& logq_path = std::nullopt);

/// Writes `contents` to a temporary sibling and renames it into place.
void write_atomic(const fs::path& path, const std::string& contents);

struct SplitFractions {
  double train = 0.0;
  double validation = 0.8;
  double test = 0.2;

  void check() const;
};

/// Seeded shuffle of the rows into train, validation, and test.
std::vector<Split> assign_splits(Index n_rows, const SplitFractions& fractions, std::uint64_t seed);

struct RunConfig {
  std::string objective = "hybrid";  // log, rank, hybrid, moment, mean-sq, interval, sample
  double lambda_rank = 100.0;
  std::vector<HybridComponent> components;  // overrides the named objective when set
  bool local = false;
  double alpha = 0.1;
  SmoothingConfig smoothing;
  bool smooth_rank = false;
  MixtureOptions mixture;
  IntervalOptions interval;
  SampleStackingOptions sample;
  SplitFractions fractions;
  std::uint64_t seed = 0;
  std::string table_path;
  std::string draws_path;
  std::string logq_path;

  HybridSpec objective_spec() const;
  void check() const;
};

Json to_json(const RunConfig& config);
RunConfig run_config_from_json(const Json& j);

/// FNV-1a over the key-sorted compact dump, as 16 hex digits.
std::string config_hash(const Json& config);

Json to_json(const StackedPosterior& posterior);
StackedPosterior posterior_from_json(const Json& j);

struct FitArtifact {
  StackedPosterior posterior = RawInference{0};
  Json config = Json::object();
  std::uint64_t seed = 0;
};

void save_fit(const FitArtifact& artifact, const fs::path& path);
FitArtifact load_fit(const fs::path& path);

Json to_json(const EvaluationReport& report);
Json to_json(const ValidationReport& report);

/// metric,best,uniform,stacked; absent values are empty cells.
std::string comparison_csv(const Comparison& comparison);
/// label,dim,bin,lower,upper,count for every report carrying a histogram.
std::string rank_histogram_csv(const std::vector<const EvaluationReport*>& reports, Index bins);

/// Fits whatever the configuration names on the provided data.
StackedPosterior run_stack(const RunConfig& config, const SimulationTable& table,
                           const PosteriorEnsemble& ensemble);

/// Warnings and convergence flags carried by a fit, for reporting.
std::vector<std::string> fit_warnings(const StackedPosterior& posterior);

/// Default seed, overridable by the SBSTACK_SEED environment variable.
std::uint64_t default_seed();

}  // namespace sbstack
