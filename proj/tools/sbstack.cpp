#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sbstack/core.hpp"
#include "sbstack/evaluate.hpp"
#include "sbstack/io.hpp"
#include "sbstack/synthetic.hpp"

using namespace sbstack;

namespace {

constexpr int kValidationFailure = 2;
constexpr int kNumericalFailure = 3;

struct DataPaths {
  std::string table;
  std::string draws;
  std::string logq;

  void add(CLI::App* cmd) {
    cmd->add_option("--table", table, "table file (JSON lines)")->required();
    cmd->add_option("--draws", draws, "draws file (JSON lines)")->required();
    cmd->add_option("--logq", logq, "log density file (JSON lines)");
  }
};

struct Loaded {
  SimulationTable table;
  PosteriorEnsemble ensemble;
};

Loaded load(const DataPaths& p, const SplitFractions& fractions, std::uint64_t seed) {
  bool had_splits = false;
  Loaded out;
  out.table = load_table(p.table, &had_splits);
  if (!had_splits) out.table.split = assign_splits(out.table.n_sims(), fractions, seed);
  out.ensemble = load_ensemble(p.draws, p.logq.empty() ? std::nullopt
                                                       : std::optional<fs::path>(p.logq));
  if (out.table.dim() != out.ensemble.dim()) {
    throw SchemaError("table has d=" + std::to_string(out.table.dim()) + " but draws have d=" +
                      std::to_string(out.ensemble.dim()));
  }
  if (out.table.n_sims() != out.ensemble.n_sims()) {
    throw SchemaError("table has N=" + std::to_string(out.table.n_sims()) + " rows but draws cover N=" +
                      std::to_string(out.ensemble.n_sims()));
  }
  return out;
}

void write_meta(const std::string& path, const std::string& command, const Json& config,
                std::uint64_t seed) {
  write_atomic(path + ".meta.json", Json{{"command", command},
                                         {"config", config},
                                         {"config_hash", config_hash(config)},
                                         {"seed", seed}}
                                        .dump(2) + "\n");
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

Json report_bundle(const Comparison& cmp, const Json& config, std::uint64_t seed) {
  Json individual = Json::array();
  for (const auto& r : cmp.individual) individual.push_back(to_json(r));
  return Json{{"stacked", to_json(cmp.stacked)},
              {"uniform", to_json(cmp.uniform)},
              {"individual", individual},
              {"config_hash", config_hash(config)},
              {"seed", seed}};
}

void emit_comparison(const Comparison& cmp, const Json& config, std::uint64_t seed,
                     const std::string& report_path, const std::string& csv_path,
                     const std::string& hist_path, Index bins) {
  if (!report_path.empty()) write_atomic(report_path, report_bundle(cmp, config, seed).dump(2) + "\n");
  const std::string csv = comparison_csv(cmp);
  if (csv_path.empty()) {
    std::cout << csv;
  } else {
    write_atomic(csv_path, csv);
    write_meta(csv_path, "comparison", config, seed);
  }
  if (!hist_path.empty()) {
    std::vector<const EvaluationReport*> reports;
    for (const auto& r : cmp.individual) reports.push_back(&r);
    reports.push_back(&cmp.uniform);
    reports.push_back(&cmp.stacked);
    write_atomic(hist_path, rank_histogram_csv(reports, bins));
    write_meta(hist_path, "rank-histogram", config, seed);
  }
  print_warnings(cmp.stacked.warnings);
}

HybridComponent parse_component(const std::string& text) {
  const auto eq = text.find('=');
  const std::string tag = text.substr(0, eq);
  double multiplier = 1.0;
  if (eq != std::string::npos) {
    try {
      multiplier = std::stod(text.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigurationError("component '" + text + "' needs tag=multiplier");
    }
  }
  return {parse_objective_tag(tag), multiplier};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stacking of simulation-based posterior ensembles"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  bool seed_given = false;
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { seed = v, seed_given = true; },
        "random seed (default: SBSTACK_SEED or 0)");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a Gaussian scenario with known truth");
  std::string scenario = "four-corrupted";
  Index synth_n = 10000;
  Index synth_s = 100;
  std::string synth_out = ".";
  bool no_logq = false;
  synth->add_option("--scenario", scenario, "scenario name")
      ->check(CLI::IsMember(scenario_names()));
  synth->add_option("--n", synth_n, "simulation rows")->check(CLI::PositiveNumber);
  synth->add_option("--s", synth_s, "draws per row and inference")->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "output directory");
  synth->add_flag("--no-logq", no_logq, "skip the log density file");
  add_seed(synth);

  // stack
  auto* stack = app.add_subcommand("stack", "fit stacking weights");
  DataPaths stack_paths;
  stack_paths.add(stack);
  RunConfig config;
  std::vector<std::string> components;
  std::string config_path;
  std::string fit_out = "fit.json";
  std::string stack_report;
  std::string stack_csv;
  std::string stack_hist;
  Index bins = 20;
  stack->add_option("--config", config_path, "run configuration JSON; flags override it");
  stack->add_option("--objective", config.objective, "log, rank, hybrid, moment, mean-sq, interval, sample");
  stack->add_option("--lambda-rank", config.lambda_rank, "rank penalty multiplier for hybrid");
  stack->add_option("--component", components, "objective component tag=multiplier (repeatable)");
  stack->add_flag("--local", config.local, "weights depend on y (linear softmax)");
  stack->add_option("--alpha", config.alpha, "interval level");
  stack->add_option("--max-iterations", config.mixture.max_iterations, "mixture optimizer iterations");
  stack->add_option("--max-rounds", config.sample.max_rounds, "sample stacking outer rounds");
  stack->add_option("--train", config.fractions.train, "train fraction for unlabeled tables");
  stack->add_option("--validation", config.fractions.validation, "validation fraction");
  stack->add_option("--test", config.fractions.test, "test fraction");
  stack->add_option("--out", fit_out, "fit artifact path");
  stack->add_option("--report", stack_report, "evaluation report JSON path");
  stack->add_option("--csv", stack_csv, "comparison CSV path (default: stdout)");
  stack->add_option("--histogram-csv", stack_hist, "rank histogram CSV path");
  stack->add_option("--bins", bins, "rank histogram bins")->check(CLI::Range(2, 100000));
  add_seed(stack);

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score a fit against the best single and uniform");
  DataPaths eval_paths;
  eval_paths.add(evaluate_cmd);
  std::string fit_in;
  std::string eval_report;
  std::string eval_csv;
  std::string eval_hist;
  double eval_alpha = 0.1;
  evaluate_cmd->add_option("--fit", fit_in, "fit artifact")->required();
  evaluate_cmd->add_option("--alpha", eval_alpha, "interval level");
  evaluate_cmd->add_option("--bins", bins, "rank histogram bins")->check(CLI::Range(2, 100000));
  evaluate_cmd->add_option("--report", eval_report, "evaluation report JSON path");
  evaluate_cmd->add_option("--csv", eval_csv, "comparison CSV path (default: stdout)");
  evaluate_cmd->add_option("--histogram-csv", eval_hist, "rank histogram CSV path");
  add_seed(evaluate_cmd);

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "draw from a stacked posterior");
  DataPaths sample_paths;
  sample_paths.add(sample_cmd);
  std::string sample_fit;
  std::string sample_out = "stacked_draws.jsonl";
  std::string sample_split = "test";
  Index s_out = 0;
  sample_cmd->add_option("--fit", sample_fit, "fit artifact")->required();
  sample_cmd->add_option("--s-out", s_out, "draws per row (default: S)");
  sample_cmd->add_option("--split", sample_split, "rows to draw for")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  sample_cmd->add_option("--out", sample_out, "draws file path");
  add_seed(sample_cmd);

  // validate
  auto* validate_cmd = app.add_subcommand("validate", "check data files for schema and value errors");
  DataPaths validate_paths;
  validate_paths.add(validate_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kValidationFailure;
  }

  try {
    if (!seed_given) seed = default_seed();

    if (*synth) {
      const GaussianScenario sc = named_scenario(scenario, synth_n, synth_s, seed);
      const GeneratedData data = generate(sc);
      const fs::path dir(synth_out);
      save_table(data.table, dir / "table.jsonl");
      save_ensemble(data.ensemble, dir / "draws.jsonl",
                    no_logq ? std::nullopt : std::optional<fs::path>(dir / "logq.jsonl"));
      const Json cfg{{"scenario", scenario}, {"n", synth_n}, {"s", synth_s}, {"seed", seed}};
      write_meta((dir / "table.jsonl").string(), "synth", cfg, seed);
      std::cerr << "wrote " << synth_n << " rows, " << sc.n_inferences() << " inferences to "
                << dir.string() << "\n";
      return 0;
    }

    if (*stack) {
      RunConfig base;
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw SchemaError("cannot open " + config_path);
        try {
          base = run_config_from_json(Json::parse(in));
        } catch (const Json::exception& err) {
          throw SchemaError(config_path + ": " + err.what());
        }
      }
      // Flags given on the command line override the file.
      auto given = [&](const char* name) { return stack->count(name) > 0; };
      if (given("--objective")) base.objective = config.objective;
      if (given("--lambda-rank")) base.lambda_rank = config.lambda_rank;
      if (given("--local")) base.local = config.local;
      if (given("--alpha")) base.alpha = config.alpha;
      if (given("--max-iterations")) base.mixture.max_iterations = config.mixture.max_iterations;
      if (given("--max-rounds")) base.sample.max_rounds = config.sample.max_rounds;
      if (given("--train")) base.fractions.train = config.fractions.train;
      if (given("--validation")) base.fractions.validation = config.fractions.validation;
      if (given("--test")) base.fractions.test = config.fractions.test;
      if (!components.empty()) {
        base.components.clear();
        for (const auto& c : components) base.components.push_back(parse_component(c));
      }
      if (seed_given || config_path.empty()) base.seed = seed;
      base.table_path = stack_paths.table;
      base.draws_path = stack_paths.draws;
      base.logq_path = stack_paths.logq;
      base.sample.seed = base.seed;
      base.check();

      const Loaded data = load(stack_paths, base.fractions, base.seed);
      const ValidationReport check = validate(data.table, data.ensemble);
      if (!check.ok()) {
        for (const auto& v : check.violations) std::cerr << "invalid input: " << v.message << "\n";
        return kValidationFailure;
      }
      const StackedPosterior fit = run_stack(base, data.table, data.ensemble);
      print_warnings(fit_warnings(fit));
      const Json cfg = to_json(base);
      save_fit({fit, cfg, base.seed}, fit_out);
      std::cerr << "wrote " << describe(fit) << " fit to " << fit_out << "\n";

      if (data.table.rows(Split::Test).empty()) {
        std::cerr << "warning: no test rows; skipping the evaluation report\n";
        return 0;
      }
      EvaluationOptions eo;
      eo.alpha = base.alpha;
      eo.bins = bins;
      eo.seed = base.seed;
      const Comparison cmp = compare(fit, data.table, data.ensemble, eo);
      emit_comparison(cmp, cfg, base.seed, stack_report, stack_csv, stack_hist, bins);
      return 0;
    }

    if (*evaluate_cmd) {
      const FitArtifact artifact = load_fit(fit_in);
      const RunConfig fit_config = run_config_from_json(artifact.config);
      const Loaded data = load(eval_paths, fit_config.fractions, artifact.seed);
      EvaluationOptions eo;
      eo.alpha = evaluate_cmd->count("--alpha") > 0 ? eval_alpha : fit_config.alpha;
      eo.bins = bins;
      eo.seed = seed_given ? seed : artifact.seed;
      const Comparison cmp = compare(artifact.posterior, data.table, data.ensemble, eo);
      Json cfg = artifact.config;
      cfg["evaluation"] = {{"alpha", eo.alpha}, {"bins", eo.bins}, {"seed", eo.seed}};
      emit_comparison(cmp, cfg, eo.seed, eval_report, eval_csv, eval_hist, bins);
      return 0;
    }

    if (*sample_cmd) {
      const FitArtifact artifact = load_fit(sample_fit);
      const RunConfig fit_config = run_config_from_json(artifact.config);
      const Loaded data = load(sample_paths, fit_config.fractions, artifact.seed);
      const std::vector<Index> rows = data.table.rows(parse_split(sample_split));
      if (rows.empty()) throw EvaluationError("no rows labeled '" + sample_split + "'");
      const std::uint64_t draw_seed = seed_given ? seed : artifact.seed;
      const Index S = data.ensemble.n_draws();
      const Index n_out = s_out > 0 ? s_out : S;
      if (n_out > S) {
        throw CapacityError("requested " + std::to_string(n_out) + " draws per row but inferences hold " +
                            std::to_string(S));
      }
      std::vector<Eigen::MatrixXd> blocks;
      std::vector<std::string> warnings;
      if (const auto* mix = std::get_if<MixtureFit>(&artifact.posterior)) {
        blocks = sample_mixture_rows(*mix, data.table, data.ensemble, rows, n_out, draw_seed, &warnings);
      } else if (std::holds_alternative<IntervalFit>(artifact.posterior)) {
        throw ConfigurationError("interval fits define endpoints only and cannot be sampled");
      } else {
        std::vector<Eigen::MatrixXd> full;
        if (const auto* raw = std::get_if<RawInference>(&artifact.posterior)) {
          for (Index n : rows) full.push_back(data.ensemble.draws(raw->k, n));
        } else {
          full = aggregate_draws(std::get<SampleStackingFit>(artifact.posterior).aggregator,
                                 data.ensemble, rows);
        }
        // Paired draws: keep a seeded subset of S_out indices per row.
        for (std::size_t i = 0; i < rows.size(); ++i) {
          std::mt19937_64 rng = row_stream(draw_seed, static_cast<std::uint64_t>(rows[i]));
          std::vector<Index> order(static_cast<std::size_t>(S));
          std::iota(order.begin(), order.end(), Index{0});
          std::shuffle(order.begin(), order.end(), rng);
          Eigen::MatrixXd block(n_out, data.ensemble.dim());
          for (Index s = 0; s < n_out; ++s) block.row(s) = full[i].row(order[static_cast<std::size_t>(s)]);
          blocks.push_back(std::move(block));
        }
      }
      std::string text;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        Json rec{{"k", 0}, {"n", rows[i]}, {"draws", Json::array()}};
        for (Index s = 0; s < n_out; ++s) {
          Json draw = Json::array();
          for (Index j = 0; j < blocks[i].cols(); ++j) draw.push_back(blocks[i](s, j));
          rec["draws"].push_back(std::move(draw));
        }
        text += rec.dump();
        text += '\n';
      }
      write_atomic(sample_out, text);
      Json cfg = artifact.config;
      cfg["sampling"] = {{"s_out", n_out}, {"split", sample_split}, {"seed", draw_seed}};
      write_meta(sample_out, "sample", cfg, draw_seed);
      print_warnings(warnings);
      return 0;
    }

    if (*validate_cmd) {
      const Loaded data = load(validate_paths, SplitFractions{}, seed);
      const ValidationReport report = validate(data.table, data.ensemble);
      std::cout << to_json(report).dump(2) << "\n";
      return report.ok() ? 0 : kValidationFailure;
    }
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kNumericalFailure;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kValidationFailure;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
