#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "sbstack/io.hpp"
#include "sbstack/synthetic.hpp"

using namespace sbstack;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("sbstack_io_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Expects a SchemaError whose message mentions the given fragment.
void check_schema_error(const std::function<void()>& f, const std::string& fragment) {
  try {
    f();
    FAIL("expected a schema error mentioning " << fragment);
  } catch (const SchemaError& e) {
    CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, std::string(e.what()));
  }
}

}  // namespace

TEST_CASE("table and ensemble round trip bit for bit") {
  TempDir dir;
  GeneratedData data = generate(four_corrupted_scenario(50, 7, 3));
  Eigen::MatrixXd lq = data.ensemble.log_q();
  lq(2, 5) = -std::numeric_limits<double>::infinity();
  data.ensemble.set_log_q(lq);

  save_table(data.table, dir / "t.jsonl");
  save_ensemble(data.ensemble, dir / "d.jsonl", dir / "l.jsonl");
  bool had_splits = false;
  const SimulationTable table = load_table(dir / "t.jsonl", &had_splits);
  CHECK(had_splits);
  CHECK(table.theta == data.table.theta);
  CHECK(table.y == data.table.y);
  CHECK(table.split == data.table.split);
  const PosteriorEnsemble ens = load_ensemble(dir / "d.jsonl", fs::path(dir / "l.jsonl"));
  CHECK(ens.n_inferences() == 4);
  CHECK(ens.n_draws() == 7);
  for (Index k = 0; k < 4; ++k) {
    for (Index n = 0; n < 50; ++n) REQUIRE(ens.draws(k, n) == data.ensemble.draws(k, n));
  }
  CHECK(ens.log_q() == lq);
  CHECK(read_file(dir / "l.jsonl").find("null") != std::string::npos);

  const PosteriorEnsemble bare = load_ensemble(dir / "d.jsonl");
  CHECK_FALSE(bare.has_log_q());
  // No temporary siblings left behind.
  for (const auto& entry : fs::directory_iterator(dir.path)) {
    CHECK(entry.path().extension() == ".jsonl");
  }
}

TEST_CASE("table schema errors carry line numbers") {
  TempDir dir;
  const fs::path p = dir / "t.jsonl";
  write_file(p, R"({"n":0,"theta":[1.0],"y":[0.0],"split":"test"}
{"n":1,"theta":[1.0, 2.0],"y":[0.0],"split":"test"}
)");
  check_schema_error([&] { load_table(p); }, ":2:");

  write_file(p, R"({"n":0,"theta":[1.0],"y":[0.0],"split":"test"}
{"n":1,"theta":[1.0],"y":[0.0]}
)");
  check_schema_error([&] { load_table(p); }, "every row or on none");

  write_file(p, "{\"n\":0,\"theta\":[1.0],\"y\":[0.0]}\nnot json\n");
  check_schema_error([&] { load_table(p); }, ":2: malformed");

  write_file(p, "{\"n\":0,\"y\":[0.0]}\n");
  check_schema_error([&] { load_table(p); }, "theta");

  write_file(p, "{\"n\":0,\"theta\":[1.0],\"y\":[0.0]}\n{\"n\":0,\"theta\":[1.0],\"y\":[0.0]}\n");
  check_schema_error([&] { load_table(p); }, "duplicate");

  write_file(p, "{\"n\":0,\"theta\":[1.0],\"y\":[0.0],\"split\":\"holdout\"}\n");
  CHECK_THROWS_AS(load_table(p), SchemaError);

  // Unlabeled rows load without splits reported.
  write_file(p, "{\"n\":1,\"theta\":[1.0],\"y\":[0.0]}\n{\"n\":0,\"theta\":[2.0],\"y\":[0.5]}\n");
  bool had_splits = true;
  const SimulationTable t = load_table(p, &had_splits);
  CHECK_FALSE(had_splits);
  CHECK(t.theta(0, 0) == 2.0);

  CHECK_THROWS_AS(load_table(dir / "missing.jsonl"), SchemaError);
}

TEST_CASE("ensemble schema errors") {
  TempDir dir;
  const fs::path d = dir / "d.jsonl";
  const fs::path l = dir / "l.jsonl";
  write_file(d, R"({"k":0,"n":0,"draws":[[1.0],[2.0]]}
{"k":0,"n":1,"draws":[[1.0],[2.0],[3.0]]}
)");
  check_schema_error([&] { load_ensemble(d); }, ":2:");

  write_file(d, R"({"k":0,"n":0,"draws":[[1.0],[2.0]]}
{"k":0,"n":1,"draws":[[1.0, 0.0],[2.0, 0.0]]}
)");
  check_schema_error([&] { load_ensemble(d); }, "d=");

  write_file(d, R"({"k":0,"n":0,"draws":[[1.0],[2.0]]}
{"k":1,"n":1,"draws":[[1.0],[2.0]]}
)");
  CHECK_THROWS_AS(load_ensemble(d), SchemaError);

  write_file(d, R"({"k":0,"n":0,"draws":[[1.0],[2.0]]}
{"k":0,"n":1,"draws":[[1.0],[2.0]]}
)");
  write_file(l, R"({"k":0,"n":0,"logq":-1.5}
)");
  check_schema_error([&] { load_ensemble(d, l); }, "no logq record");
  write_file(l, R"({"k":0,"n":0,"logq":-1.5}
{"k":0,"n":1,"logq":null}
)");
  const PosteriorEnsemble ens = load_ensemble(d, l);
  CHECK(ens.log_q()(0, 0) == -1.5);
  CHECK(std::isinf(ens.log_q()(0, 1)));
}

TEST_CASE("split assignment is seeded and honors fractions") {
  const std::vector<Split> a = assign_splits(1000, SplitFractions{0.1, 0.6, 0.3}, 4);
  CHECK(a == assign_splits(1000, SplitFractions{0.1, 0.6, 0.3}, 4));
  CHECK(a != assign_splits(1000, SplitFractions{0.1, 0.6, 0.3}, 5));
  CHECK(std::count(a.begin(), a.end(), Split::Train) == 100);
  CHECK(std::count(a.begin(), a.end(), Split::Validation) == 600);
  CHECK(std::count(a.begin(), a.end(), Split::Test) == 300);
  CHECK_THROWS_AS((SplitFractions{0.5, 0.6, 0.3}.check()), ConfigurationError);
  CHECK_THROWS_AS((SplitFractions{-0.1, 0.8, 0.3}.check()), ConfigurationError);
}

TEST_CASE("run configuration round trip and hash") {
  RunConfig c;
  c.objective = "rank";
  c.lambda_rank = 25.0;
  c.components = {{ObjectiveTag::LogScore, 1.0}, {ObjectiveTag::RankMean, 10.0}};
  c.alpha = 0.2;
  c.mixture.max_iterations = 77;
  c.sample.max_rounds = 9;
  c.seed = 123;
  const Json j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.components.size() == 2);
  CHECK(back.mixture.max_iterations == 77);
  CHECK(back.seed == 123);

  const std::string h = config_hash(j);
  CHECK(h.size() == 16);
  CHECK(h == config_hash(Json::parse(j.dump(2))));
  Json other = j;
  other["alpha"] = 0.3;
  CHECK(config_hash(other) != h);
  // Key order does not matter.
  CHECK(config_hash(Json::parse(R"({"b":1,"a":2})")) == config_hash(Json::parse(R"({"a":2,"b":1})")));

  RunConfig bad;
  bad.objective = "crps";
  CHECK_THROWS_AS(bad.check(), ConfigurationError);
  bad.objective = "interval";
  bad.local = true;
  CHECK_THROWS_AS(bad.check(), ConfigurationError);
  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"alpha":"wide"})")), SchemaError);
}

TEST_CASE("fit artifacts round trip for every kind") {
  TempDir dir;
  const GeneratedData data = generate(four_corrupted_scenario(300, 10, 6));
  std::vector<StackedPosterior> fits;
  fits.emplace_back(RawInference{2});
  fits.emplace_back(fit_mixture(data.table, data.ensemble, HybridSpec::log_plus_rank_moments()));
  MixtureOptions lo;
  lo.max_iterations = 50;
  fits.emplace_back(fit_local_mixture(data.table, data.ensemble, HybridSpec::single(ObjectiveTag::LogScore), lo));
  fits.emplace_back(fit_intervals(data.table, compute_intervals(data.ensemble, 0.1)));
  SampleStackingOptions so;
  so.max_rounds = 3;
  fits.emplace_back(fit_sample_stacking(data.table, data.ensemble, so));

  for (const StackedPosterior& fit : fits) {
    FitArtifact art;
    art.posterior = fit;
    art.seed = 77;
    art.config = to_json(RunConfig{});
    save_fit(art, dir / "fit.json");
    const FitArtifact back = load_fit(dir / "fit.json");
    CHECK(back.seed == 77);
    CHECK(back.config == art.config);
    CHECK(to_json(back.posterior) == to_json(fit));
    CHECK(back.posterior.index() == fit.index());
    // Reloaded fits evaluate identically.
    const EvaluationReport a = evaluate(fit, data.table, data.ensemble);
    const EvaluationReport b = evaluate(back.posterior, data.table, data.ensemble);
    CHECK(to_json(a).dump() == to_json(b).dump());
  }
  const auto& hybrid = std::get<MixtureFit>(fits[1]);
  REQUIRE(hybrid.objective.summed_log_score());
  save_fit(FitArtifact{fits[1], Json::object(), 77}, dir / "fit.json");
  CHECK(std::get<MixtureFit>(load_fit(dir / "fit.json").posterior).objective.summed_log_score());
  CHECK_THROWS_AS(posterior_from_json(Json::parse(R"({"kind":"forest"})")), SchemaError);
  write_file(dir / "bad.json", "{");
  CHECK_THROWS_AS(load_fit(dir / "bad.json"), SchemaError);
}

TEST_CASE("reports and csv output") {
  const GeneratedData data = generate(four_corrupted_scenario(400, 10, 7));
  IntervalFit fit = fit_intervals(data.table, compute_intervals(data.ensemble, 0.1));
  const Comparison c = compare(fit, data.table, data.ensemble);

  const Json j = to_json(c.stacked);
  CHECK(j["expected_log_pred_density"].contains("absent"));
  CHECK(j["coverage_error"].contains("average"));

  const std::string csv = comparison_csv(c);
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "metric,best,uniform,stacked");
  std::string line;
  bool found_empty_elpd = false;
  while (std::getline(lines, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 3);
    if (line.rfind("elpd,", 0) == 0) found_empty_elpd = line.back() == ',';
  }
  CHECK(found_empty_elpd);

  const EvaluationReport r = evaluate(RawInference{0}, data.table, data.ensemble);
  const std::string hist = rank_histogram_csv({&r}, 20);
  std::istringstream hl(hist);
  std::getline(hl, header);
  CHECK(header == "label,dim,bin,lower,upper,count");
  int rows = 0;
  while (std::getline(hl, line)) ++rows;
  CHECK(rows == 20);

  ValidationReport v;
  v.violations.push_back({"bad", Index{1}, Index{2}, std::nullopt});
  const Json vj = to_json(v);
  CHECK(vj["ok"] == false);
  CHECK(vj["violations"][0]["n"] == 2);
  CHECK_FALSE(vj["violations"][0].contains("s"));
}

TEST_CASE("seed from the environment") {
  unsetenv("SBSTACK_SEED");
  const std::uint64_t base = default_seed();
  setenv("SBSTACK_SEED", "4242", 1);
  CHECK(default_seed() == 4242);
  setenv("SBSTACK_SEED", "-3x", 1);
  CHECK_THROWS_AS(default_seed(), ConfigurationError);
  unsetenv("SBSTACK_SEED");
  CHECK(default_seed() == base);
}

TEST_CASE("run_stack dispatches on the objective") {
  const GeneratedData data = generate(four_corrupted_scenario(200, 10, 8));
  RunConfig c;
  c.objective = "log";
  CHECK(std::holds_alternative<MixtureFit>(run_stack(c, data.table, data.ensemble)));
  c.objective = "interval";
  CHECK(std::holds_alternative<IntervalFit>(run_stack(c, data.table, data.ensemble)));
  c.objective = "log";
  c.local = true;
  CHECK(std::get<MixtureFit>(run_stack(c, data.table, data.ensemble)).is_local());
}
