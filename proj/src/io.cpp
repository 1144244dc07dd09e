#include "sbstack/io.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace sbstack {

namespace {

std::string where(const fs::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

template <typename F>
void for_each_record(const fs::path& path, F&& visit) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json record;
    try {
      record = Json::parse(text);
    } catch (const Json::exception& err) {
      throw SchemaError(where(path, line) + "malformed record: " + err.what());
    }
    if (!record.is_object()) throw SchemaError(where(path, line) + "record is not an object");
    try {
      visit(record, line);
    } catch (const Json::exception& err) {
      throw SchemaError(where(path, line) + err.what());
    }
  }
}

Index get_index(const Json& record, const char* key, const fs::path& path, std::size_t line) {
  if (!record.contains(key)) throw SchemaError(where(path, line) + "missing field '" + key + "'");
  const Json& v = record.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw SchemaError(where(path, line) + "field '" + key + "' is not a nonnegative integer");
  }
  return static_cast<Index>(v.get<long long>());
}

Eigen::VectorXd get_vector(const Json& v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = v[i].get<double>();
  return out;
}

Json from_vector(const Eigen::VectorXd& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Json from_row(const Eigen::RowVectorXd& v) { return from_vector(v.transpose()); }

// Matrices are arrays of rows.
Json from_matrix(const Eigen::MatrixXd& m) {
  Json out = Json::array();
  for (Index i = 0; i < m.rows(); ++i) out.push_back(from_row(m.row(i)));
  return out;
}

Eigen::MatrixXd get_matrix(const Json& v, Index cols_if_empty = 0) {
  const auto rows = static_cast<Index>(v.size());
  const Index cols = rows > 0 ? static_cast<Index>(v[0].size()) : cols_if_empty;
  Eigen::MatrixXd out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const Json& row = v[static_cast<std::size_t>(i)];
    if (static_cast<Index>(row.size()) != cols) throw SchemaError("ragged matrix");
    for (Index j = 0; j < cols; ++j) out(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return out;
}

std::string dump_lines(const std::vector<Json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

void require_finite(const Eigen::MatrixXd& m, const std::string& what) {
  if (!m.allFinite()) throw SchemaError(what + " contains non-finite values");
}

Json to_json(const HybridSpec& spec) {
  Json components = Json::array();
  for (const auto& c : spec.components()) {
    components.push_back({{"tag", std::string(to_string(c.tag))}, {"multiplier", c.multiplier}});
  }
  return {{"components", components}, {"summed_log_score", spec.summed_log_score()}};
}

HybridSpec hybrid_from_json(const Json& j) {
  // A bare array is a component list with the per-row log score.
  const Json& list = j.is_array() ? j : j.at("components");
  std::vector<HybridComponent> components;
  for (const auto& c : list) {
    components.push_back({parse_objective_tag(c.at("tag").get<std::string>()),
                          c.at("multiplier").get<double>()});
  }
  HybridSpec spec = components.empty() ? HybridSpec() : HybridSpec(std::move(components));
  if (j.is_object()) spec.set_summed_log_score(j.value("summed_log_score", false));
  return spec;
}

std::string feature_map_name(FeatureMap map) {
  return map == FeatureMap::Identity ? "identity" : "standardized";
}

FeatureMap parse_feature_map(const std::string& name) {
  if (name == "identity") return FeatureMap::Identity;
  if (name == "standardized") return FeatureMap::Standardized;
  throw SchemaError("unknown feature map '" + name + "'");
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

std::string csv_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream out;
  out << std::setprecision(17) << *v;
  return out.str();
}

template <typename T>
Json metric_json(const Metric<T>& m, Json value) {
  if (!m.present()) return Json{{"absent", m.absent_reason}};
  return value;
}

}  // namespace

void write_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw SchemaError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw SchemaError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw SchemaError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

SimulationTable load_table(const fs::path& path, bool* had_splits) {
  std::map<Index, std::pair<std::size_t, Json>> rows;
  Index d = -1;
  Index d_y = -1;
  int labeled = -1;
  for_each_record(path, [&](const Json& r, std::size_t line) {
    const Index n = get_index(r, "n", path, line);
    if (!r.contains("theta") || !r.at("theta").is_array()) {
      throw SchemaError(where(path, line) + "missing array field 'theta'");
    }
    if (!r.contains("y") || !r.at("y").is_array()) {
      throw SchemaError(where(path, line) + "missing array field 'y'");
    }
    const auto rd = static_cast<Index>(r.at("theta").size());
    const auto ry = static_cast<Index>(r.at("y").size());
    if (d < 0) {
      d = rd;
      d_y = ry;
    }
    if (rd != d) {
      throw SchemaError(where(path, line) + "theta has " + std::to_string(rd) +
                        " entries, earlier rows have " + std::to_string(d));
    }
    if (ry != d_y) {
      throw SchemaError(where(path, line) + "y has " + std::to_string(ry) +
                        " entries, earlier rows have " + std::to_string(d_y));
    }
    const int has = r.contains("split") ? 1 : 0;
    if (labeled < 0) labeled = has;
    if (has != labeled) {
      throw SchemaError(where(path, line) + "split labels must be given on every row or on none");
    }
    if (!rows.emplace(n, std::make_pair(line, r)).second) {
      throw SchemaError(where(path, line) + "duplicate row n=" + std::to_string(n));
    }
  });
  if (rows.empty()) throw SchemaError(path.string() + ": table has no rows");
  const auto N = static_cast<Index>(rows.size());
  if (rows.rbegin()->first != N - 1) {
    throw SchemaError(path.string() + ": row indices must cover 0.." + std::to_string(N - 1));
  }
  Eigen::MatrixXd theta(N, d);
  Eigen::MatrixXd y(N, d_y);
  std::vector<Split> split(static_cast<std::size_t>(N), Split::Validation);
  for (const auto& [n, entry] : rows) {
    const auto& [line, r] = entry;
    try {
      theta.row(n) = get_vector(r.at("theta")).transpose();
      y.row(n) = get_vector(r.at("y")).transpose();
      if (labeled == 1) split[static_cast<std::size_t>(n)] = parse_split(r.at("split").get<std::string>());
    } catch (const Json::exception& err) {
      throw SchemaError(where(path, line) + err.what());
    } catch (const SchemaError& err) {
      throw SchemaError(where(path, line) + err.what());
    }
  }
  if (had_splits != nullptr) *had_splits = labeled == 1;
  return SimulationTable(std::move(theta), std::move(y), std::move(split));
}

void save_table(const SimulationTable& table, const fs::path& path) {
  require_finite(table.theta, "table theta");
  require_finite(table.y, "table y");
  std::vector<Json> records;
  records.reserve(static_cast<std::size_t>(table.n_sims()));
  for (Index n = 0; n < table.n_sims(); ++n) {
    records.push_back({{"n", n},
                       {"theta", from_row(table.theta.row(n))},
                       {"y", from_row(table.y.row(n))},
                       {"split", std::string(to_string(table.split[static_cast<std::size_t>(n)]))}});
  }
  write_atomic(path, dump_lines(records));
}

PosteriorEnsemble load_ensemble(const fs::path& draws_path, const std::optional<fs::path>& logq_path) {
  struct Block {
    Index k, n;
    Eigen::MatrixXd draws;
  };
  std::vector<Block> blocks;
  Index S = -1;
  Index d = -1;
  Index K = 0;
  Index N = 0;
  for_each_record(draws_path, [&](const Json& r, std::size_t line) {
    const Index k = get_index(r, "k", draws_path, line);
    const Index n = get_index(r, "n", draws_path, line);
    if (!r.contains("draws") || !r.at("draws").is_array()) {
      throw SchemaError(where(draws_path, line) + "missing array field 'draws'");
    }
    const Json& arr = r.at("draws");
    const auto rs = static_cast<Index>(arr.size());
    if (rs == 0) throw SchemaError(where(draws_path, line) + "record holds no draws");
    if (!arr[0].is_array()) throw SchemaError(where(draws_path, line) + "each draw must be an array");
    const auto rd = static_cast<Index>(arr[0].size());
    if (S < 0) {
      S = rs;
      d = rd;
    }
    if (rs != S) {
      throw SchemaError(where(draws_path, line) + "record has S=" + std::to_string(rs) +
                        ", earlier records have S=" + std::to_string(S));
    }
    Eigen::MatrixXd m;
    try {
      m = get_matrix(arr);
    } catch (const SchemaError&) {
      throw SchemaError(where(draws_path, line) + "draws differ in dimension");
    }
    if (m.cols() != d) {
      throw SchemaError(where(draws_path, line) + "draws have d=" + std::to_string(m.cols()) +
                        ", earlier records have d=" + std::to_string(d));
    }
    K = std::max(K, k + 1);
    N = std::max(N, n + 1);
    blocks.push_back({k, n, std::move(m)});
  });
  if (blocks.empty()) throw SchemaError(draws_path.string() + ": draws file has no records");
  if (static_cast<Index>(blocks.size()) != K * N) {
    std::ostringstream msg;
    msg << draws_path.string() << ": expected one record per (k, n) for K=" << K << ", N=" << N
        << " (" << K * N << " records), found " << blocks.size();
    throw SchemaError(msg.str());
  }
  PosteriorEnsemble ensemble(K, N, S, d);
  std::vector<bool> seen(static_cast<std::size_t>(K * N), false);
  for (auto& b : blocks) {
    const auto slot = static_cast<std::size_t>(b.k * N + b.n);
    if (seen[slot]) {
      throw SchemaError(draws_path.string() + ": duplicate record for k=" + std::to_string(b.k) +
                        ", n=" + std::to_string(b.n));
    }
    seen[slot] = true;
    ensemble.draws(b.k, b.n) = std::move(b.draws);
  }

  if (logq_path) {
    Eigen::MatrixXd log_q = Eigen::MatrixXd::Constant(K, N, std::numeric_limits<double>::quiet_NaN());
    std::vector<bool> have(static_cast<std::size_t>(K * N), false);
    for_each_record(*logq_path, [&](const Json& r, std::size_t line) {
      const Index k = get_index(r, "k", *logq_path, line);
      const Index n = get_index(r, "n", *logq_path, line);
      if (k >= K || n >= N) {
        std::ostringstream msg;
        msg << where(*logq_path, line) << "record (k=" << k << ", n=" << n
            << ") is outside the draws file's K=" << K << ", N=" << N;
        throw SchemaError(msg.str());
      }
      if (!r.contains("logq")) throw SchemaError(where(*logq_path, line) + "missing field 'logq'");
      const Json& v = r.at("logq");
      const auto slot = static_cast<std::size_t>(k * N + n);
      if (have[slot]) throw SchemaError(where(*logq_path, line) + "duplicate record");
      have[slot] = true;
      log_q(k, n) = v.is_null() ? -std::numeric_limits<double>::infinity() : v.get<double>();
    });
    const auto missing = std::count(have.begin(), have.end(), false);
    if (missing > 0) {
      throw SchemaError(logq_path->string() + ": " + std::to_string(missing) +
                        " (k, n) pairs have no logq record");
    }
    ensemble.set_log_q(std::move(log_q));
  }
  return ensemble;
}

void save_ensemble(const PosteriorEnsemble& ensemble, const fs::path& draws_path,
                   const std::optional<fs::path>& logq_path) {
  std::string text;
  for (Index k = 0; k < ensemble.n_inferences(); ++k) {
    for (Index n = 0; n < ensemble.n_sims(); ++n) {
      require_finite(ensemble.draws(k, n), "draws");
      text += Json{{"k", k}, {"n", n}, {"draws", from_matrix(ensemble.draws(k, n))}}.dump();
      text += '\n';
    }
  }
  write_atomic(draws_path, text);
  if (!logq_path) return;
  if (!ensemble.has_log_q()) throw SchemaError("ensemble has no logq stream to save");
  std::string lq;
  for (Index k = 0; k < ensemble.n_inferences(); ++k) {
    for (Index n = 0; n < ensemble.n_sims(); ++n) {
      const double v = ensemble.log_q()(k, n);
      Json r{{"k", k}, {"n", n}};
      if (v == -std::numeric_limits<double>::infinity()) {
        r["logq"] = nullptr;
      } else if (!std::isfinite(v)) {
        throw SchemaError("logq is NaN or +inf at k=" + std::to_string(k) + ", n=" + std::to_string(n));
      } else {
        r["logq"] = v;
      }
      lq += r.dump();
      lq += '\n';
    }
  }
  write_atomic(*logq_path, lq);
}

void SplitFractions::check() const {
  if (train < 0.0 || validation < 0.0 || test < 0.0) {
    throw ConfigurationError("split fractions must be nonnegative");
  }
  if (std::abs(train + validation + test - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg << "split fractions sum to " << train + validation + test << ", not 1";
    throw ConfigurationError(msg.str());
  }
}

std::vector<Split> assign_splits(Index n_rows, const SplitFractions& fractions, std::uint64_t seed) {
  fractions.check();
  std::vector<Index> order(static_cast<std::size_t>(n_rows));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(splitmix64(seed ^ 0x5851f42d4c957f2dULL));
  std::shuffle(order.begin(), order.end(), rng);
  const double N = static_cast<double>(n_rows);
  const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * N));
  const auto n_val = std::min(static_cast<std::size_t>(std::llround(fractions.validation * N)),
                              order.size() - std::min(order.size(), n_train));
  std::vector<Split> out(order.size(), Split::Test);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto row = static_cast<std::size_t>(order[i]);
    if (i < n_train) {
      out[row] = Split::Train;
    } else if (i < n_train + n_val) {
      out[row] = Split::Validation;
    }
  }
  return out;
}

HybridSpec RunConfig::objective_spec() const {
  if (!components.empty()) return HybridSpec(components);
  if (objective == "log") return HybridSpec::single(ObjectiveTag::LogScore);
  if (objective == "rank") return HybridSpec::single(ObjectiveTag::RankCvm);
  if (objective == "hybrid") return HybridSpec::log_plus_rank_moments(lambda_rank);
  if (objective == "moment") return HybridSpec::single(ObjectiveTag::Moment);
  if (objective == "mean-sq") return HybridSpec::single(ObjectiveTag::MeanSquared);
  if (objective == "interval") return HybridSpec::single(ObjectiveTag::Interval);
  if (objective == "sample") return HybridSpec::single(ObjectiveTag::Discriminative);
  throw ConfigurationError("unknown objective '" + objective +
                           "' (expected log, rank, hybrid, moment, mean-sq, interval, sample)");
}

void RunConfig::check() const {
  const HybridSpec spec = objective_spec();
  const bool interval = spec.uses(ObjectiveTag::Interval);
  const bool sample = spec.uses(ObjectiveTag::Discriminative);
  if ((interval || sample) && spec.components().size() > 1) {
    throw ConfigurationError("interval and sample objectives cannot be combined with others");
  }
  if (local && (interval || sample)) {
    throw ConfigurationError("local weights apply to mixture objectives only");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigurationError("alpha must lie in (0, 1)");
  if (!(lambda_rank >= 0.0)) throw ConfigurationError("rank multiplier must be nonnegative");
  smoothing.check();
  fractions.check();
}

Json to_json(const RunConfig& c) {
  Json components = Json::array();
  for (const auto& comp : c.components) {
    components.push_back({{"tag", std::string(to_string(comp.tag))}, {"multiplier", comp.multiplier}});
  }
  return Json{
      {"objective", c.objective},
      {"lambda_rank", c.lambda_rank},
      {"components", components},
      {"local", c.local},
      {"alpha", c.alpha},
      {"smoothing", {{"tau_rank", c.smoothing.tau_rank},
                     {"tau_interval_divisor", c.smoothing.tau_interval_divisor},
                     {"smooth_rank", c.smooth_rank}}},
      {"mixture", {{"step", c.mixture.step},
                   {"max_iterations", c.mixture.max_iterations},
                   {"loss_tolerance", c.mixture.loss_tolerance},
                   {"weight_ridge", c.mixture.weight_ridge},
                   {"coefficient_ridge", c.mixture.coefficient_ridge}}},
      {"interval", {{"step", c.interval.step},
                    {"max_iterations", c.interval.max_iterations},
                    {"loss_tolerance", c.interval.loss_tolerance}}},
      {"sample", {{"max_rounds", c.sample.max_rounds},
                  {"step", c.sample.step},
                  {"utility_tolerance", c.sample.utility_tolerance},
                  {"n_features", c.sample.discriminator.n_features},
                  {"bandwidth", c.sample.discriminator.bandwidth},
                  {"ridge", c.sample.discriminator.ridge}}},
      {"fractions", {{"train", c.fractions.train},
                     {"validation", c.fractions.validation},
                     {"test", c.fractions.test}}},
      {"seed", c.seed},
      {"paths", {{"table", c.table_path}, {"draws", c.draws_path}, {"logq", c.logq_path}}},
  };
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  try {
    c.objective = j.value("objective", c.objective);
    c.lambda_rank = j.value("lambda_rank", c.lambda_rank);
    if (j.contains("components")) {
      for (const auto& comp : j.at("components")) {
        c.components.push_back({parse_objective_tag(comp.at("tag").get<std::string>()),
                                comp.value("multiplier", 1.0)});
      }
    }
    c.local = j.value("local", c.local);
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("smoothing")) {
      const Json& s = j.at("smoothing");
      c.smoothing.tau_rank = s.value("tau_rank", c.smoothing.tau_rank);
      c.smoothing.tau_interval_divisor = s.value("tau_interval_divisor", c.smoothing.tau_interval_divisor);
      c.smooth_rank = s.value("smooth_rank", c.smooth_rank);
    }
    if (j.contains("mixture")) {
      const Json& m = j.at("mixture");
      c.mixture.step = m.value("step", c.mixture.step);
      c.mixture.max_iterations = m.value("max_iterations", c.mixture.max_iterations);
      c.mixture.loss_tolerance = m.value("loss_tolerance", c.mixture.loss_tolerance);
      c.mixture.weight_ridge = m.value("weight_ridge", c.mixture.weight_ridge);
      c.mixture.coefficient_ridge = m.value("coefficient_ridge", c.mixture.coefficient_ridge);
    }
    if (j.contains("interval")) {
      const Json& m = j.at("interval");
      c.interval.step = m.value("step", c.interval.step);
      c.interval.max_iterations = m.value("max_iterations", c.interval.max_iterations);
      c.interval.loss_tolerance = m.value("loss_tolerance", c.interval.loss_tolerance);
    }
    if (j.contains("sample")) {
      const Json& m = j.at("sample");
      c.sample.max_rounds = m.value("max_rounds", c.sample.max_rounds);
      c.sample.step = m.value("step", c.sample.step);
      c.sample.utility_tolerance = m.value("utility_tolerance", c.sample.utility_tolerance);
      c.sample.discriminator.n_features = m.value("n_features", c.sample.discriminator.n_features);
      c.sample.discriminator.bandwidth = m.value("bandwidth", c.sample.discriminator.bandwidth);
      c.sample.discriminator.ridge = m.value("ridge", c.sample.discriminator.ridge);
    }
    if (j.contains("fractions")) {
      const Json& f = j.at("fractions");
      c.fractions.train = f.value("train", c.fractions.train);
      c.fractions.validation = f.value("validation", c.fractions.validation);
      c.fractions.test = f.value("test", c.fractions.test);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("paths")) {
      const Json& p = j.at("paths");
      c.table_path = p.value("table", c.table_path);
      c.draws_path = p.value("draws", c.draws_path);
      c.logq_path = p.value("logq", c.logq_path);
    }
  } catch (const Json::exception& err) {
    throw SchemaError(std::string("run configuration: ") + err.what());
  }
  c.mixture.smoothing = c.smoothing;
  c.mixture.smooth_rank = c.smooth_rank;
  c.interval.tau_divisor = c.smoothing.tau_interval_divisor;
  c.sample.seed = c.seed;
  return c;
}

std::string config_hash(const Json& config) {
  // nlohmann objects keep keys sorted, so the compact dump is canonical.
  const std::string text = config.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

Json to_json(const StackedPosterior& posterior) {
  return std::visit(
      [](const auto& p) -> Json {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, RawInference>) {
          return Json{{"kind", "raw"}, {"k", p.k}};
        } else if constexpr (std::is_same_v<T, MixtureFit>) {
          Json out{{"objective", to_json(p.objective)},
                   {"loss_trace", p.loss_trace},
                   {"monitor_trace", p.monitor_trace},
                   {"converged", p.converged},
                   {"iterations", p.iterations},
                   {"skipped_rows", p.skipped_rows},
                   {"warnings", p.warnings}};
          if (p.is_local()) {
            const LocalWeightModel& m = p.local_model();
            out["kind"] = "local-mixture";
            out["intercepts"] = from_vector(m.intercepts);
            out["coefficients"] = from_matrix(m.coefficients);
            out["feature_map"] = feature_map_name(m.feature_map);
            out["feature_mean"] = from_row(m.feature_mean);
            out["feature_scale"] = from_row(m.feature_scale);
          } else {
            out["kind"] = "mixture";
            out["weights"] = from_vector(p.global_weights().values());
          }
          return out;
        } else if constexpr (std::is_same_v<T, IntervalFit>) {
          Json traces = Json::array();
          for (const auto& t : p.loss_trace) traces.push_back(t);
          return Json{{"kind", "interval"},
                      {"alpha", p.alpha},
                      {"weights", from_matrix(p.weights)},
                      {"loss_trace", traces},
                      {"smooth_loss", from_vector(p.smooth_loss)},
                      {"exact_loss", from_vector(p.exact_loss)},
                      {"tau", from_vector(p.tau)},
                      {"converged", p.converged},
                      {"iterations", p.iterations},
                      {"swap_crossing", p.swap_crossing},
                      {"warnings", p.warnings}};
        } else {
          Json maps = Json::array();
          for (const auto& m : p.aggregator.maps) maps.push_back(from_matrix(m));
          const FeatureExpansion& f = p.discriminator.features;
          return Json{{"kind", "sample"},
                      {"offset", from_vector(p.aggregator.offset)},
                      {"maps", maps},
                      {"discriminator", {{"mean", from_row(f.mean)},
                                         {"scale", from_row(f.scale)},
                                         {"omega", from_matrix(f.omega)},
                                         {"phase", from_row(f.phase)},
                                         {"beta", from_vector(p.discriminator.beta)}}},
                      {"utility", p.utility},
                      {"utility_trace", p.utility_trace},
                      {"objective_trace", p.objective_trace},
                      {"rounds", p.rounds},
                      {"converged", p.converged},
                      {"warnings", p.warnings}};
        }
      },
      posterior);
}

StackedPosterior posterior_from_json(const Json& j) {
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "raw") return RawInference{j.at("k").get<Index>()};
    if (kind == "mixture" || kind == "local-mixture") {
      std::variant<SimplexWeights, LocalWeightModel> weights = SimplexWeights::uniform(1);
      if (kind == "mixture") {
        weights = SimplexWeights(get_vector(j.at("weights")));
      } else {
        LocalWeightModel m;
        m.intercepts = get_vector(j.at("intercepts"));
        m.feature_mean = get_vector(j.at("feature_mean")).transpose();
        m.feature_scale = get_vector(j.at("feature_scale")).transpose();
        m.coefficients = get_matrix(j.at("coefficients"), m.feature_mean.size());
        m.feature_map = parse_feature_map(j.at("feature_map").get<std::string>());
        if (m.coefficients.rows() != m.intercepts.size() ||
            m.coefficients.cols() != m.feature_mean.size() ||
            m.feature_scale.size() != m.feature_mean.size()) {
          throw SchemaError("local weight model fields disagree in shape");
        }
        weights = std::move(m);
      }
      MixtureFit fit(std::move(weights), hybrid_from_json(j.at("objective")));
      fit.loss_trace = j.value("loss_trace", std::vector<double>{});
      fit.monitor_trace = j.value("monitor_trace", std::vector<double>{});
      fit.converged = j.value("converged", false);
      fit.iterations = j.value("iterations", 0);
      fit.skipped_rows = j.value("skipped_rows", Index{0});
      fit.warnings = j.value("warnings", std::vector<std::string>{});
      return fit;
    }
    if (kind == "interval") {
      IntervalFit fit;
      fit.alpha = j.at("alpha").get<double>();
      fit.weights = get_matrix(j.at("weights"));
      if (fit.weights.cols() % 2 != 0) throw SchemaError("interval weights need 2K columns");
      for (const auto& t : j.value("loss_trace", Json::array())) {
        fit.loss_trace.push_back(t.get<std::vector<double>>());
      }
      fit.smooth_loss = get_vector(j.value("smooth_loss", Json::array()));
      fit.exact_loss = get_vector(j.value("exact_loss", Json::array()));
      fit.tau = get_vector(j.value("tau", Json::array()));
      fit.converged = j.value("converged", false);
      fit.iterations = j.value("iterations", 0);
      fit.swap_crossing = j.value("swap_crossing", false);
      fit.warnings = j.value("warnings", std::vector<std::string>{});
      return fit;
    }
    if (kind == "sample") {
      SampleStackingFit fit;
      fit.aggregator.offset = get_vector(j.at("offset"));
      const Index d = fit.aggregator.offset.size();
      for (const auto& m : j.at("maps")) fit.aggregator.maps.push_back(get_matrix(m, d));
      fit.aggregator.check();
      if (j.contains("discriminator")) {
        const Json& dj = j.at("discriminator");
        FeatureExpansion& f = fit.discriminator.features;
        f.mean = get_vector(dj.at("mean")).transpose();
        f.scale = get_vector(dj.at("scale")).transpose();
        f.phase = get_vector(dj.at("phase")).transpose();
        f.omega = get_matrix(dj.at("omega"), f.phase.size());
        if (f.omega.rows() == 0) f.omega.resize(f.mean.size(), f.phase.size());
        fit.discriminator.beta = get_vector(dj.at("beta"));
      }
      fit.utility = j.value("utility", 0.0);
      fit.utility_trace = j.value("utility_trace", std::vector<double>{});
      fit.objective_trace = j.value("objective_trace", std::vector<double>{});
      fit.rounds = j.value("rounds", 0);
      fit.converged = j.value("converged", false);
      fit.warnings = j.value("warnings", std::vector<std::string>{});
      return fit;
    }
    throw SchemaError("unknown fit kind '" + kind + "'");
  } catch (const Json::exception& err) {
    throw SchemaError(std::string("fit artifact: ") + err.what());
  }
}

void save_fit(const FitArtifact& artifact, const fs::path& path) {
  Json out{{"fit", to_json(artifact.posterior)},
           {"config", artifact.config},
           {"config_hash", config_hash(artifact.config)},
           {"seed", artifact.seed}};
  write_atomic(path, out.dump(2) + "\n");
}

FitArtifact load_fit(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& err) {
    throw SchemaError(path.string() + ": malformed fit artifact: " + err.what());
  }
  FitArtifact out;
  try {
    out.posterior = posterior_from_json(j.at("fit"));
    out.config = j.value("config", Json::object());
    out.seed = j.value("seed", std::uint64_t{0});
  } catch (const Json::exception& err) {
    throw SchemaError(path.string() + ": " + err.what());
  } catch (const SchemaError& err) {
    throw SchemaError(path.string() + ": " + err.what());
  }
  return out;
}

Json to_json(const EvaluationReport& r) {
  Json hist;
  if (r.rank_histogram.present()) hist = *r.rank_histogram.value;
  return Json{
      {"label", r.label},
      {"n_test", r.n_test},
      {"alpha", r.alpha},
      {"expected_log_pred_density",
       metric_json(r.expected_log_pred_density,
                   r.expected_log_pred_density.present() ? Json(*r.expected_log_pred_density.value) : Json())},
      {"coverage_error",
       metric_json(r.coverage_error,
                   r.coverage_error.present()
                       ? Json{{"per_dimension", from_vector(*r.coverage_error.value)},
                              {"average", *r.coverage_error_average.value}}
                       : Json())},
      {"moment_error",
       metric_json(r.moment_error, r.moment_error.present() ? Json(*r.moment_error.value) : Json())},
      {"rank_cvm", metric_json(r.rank_cvm, r.rank_cvm.present()
                                               ? Json{{"per_dimension", from_vector(*r.rank_cvm.value)},
                                                      {"sum", *r.rank_cvm_sum.value}}
                                               : Json())},
      {"rank_histogram", metric_json(r.rank_histogram, hist)},
      {"warnings", r.warnings},
  };
}

Json to_json(const ValidationReport& report) {
  Json violations = Json::array();
  for (const auto& v : report.violations) {
    Json e{{"message", v.message}};
    if (v.k) e["k"] = *v.k;
    if (v.n) e["n"] = *v.n;
    if (v.s) e["s"] = *v.s;
    violations.push_back(std::move(e));
  }
  return Json{{"ok", report.ok()}, {"violations", violations}};
}

std::string comparison_csv(const Comparison& comparison) {
  std::string out = "metric,best,uniform,stacked\n";
  for (const auto& row : comparison.rows) {
    out += row.metric + "," + csv_cell(row.best) + "," + csv_cell(row.uniform) + "," +
           csv_cell(row.stacked) + "\n";
  }
  return out;
}

std::string rank_histogram_csv(const std::vector<const EvaluationReport*>& reports, Index bins) {
  std::ostringstream out;
  out << "label,dim,bin,lower,upper,count\n";
  out << std::setprecision(17);
  for (const EvaluationReport* r : reports) {
    if (!r->rank_histogram.present()) continue;
    const auto& hist = *r->rank_histogram.value;
    for (std::size_t j = 0; j < hist.size(); ++j) {
      for (std::size_t b = 0; b < hist[j].size(); ++b) {
        const double B = static_cast<double>(bins);
        out << r->label << ',' << j << ',' << b << ',' << static_cast<double>(b) / B << ','
            << static_cast<double>(b + 1) / B << ',' << hist[j][b] << '\n';
      }
    }
  }
  return out.str();
}

StackedPosterior run_stack(const RunConfig& config, const SimulationTable& table,
                           const PosteriorEnsemble& ensemble) {
  config.check();
  const HybridSpec spec = config.objective_spec();
  if (spec.uses(ObjectiveTag::Interval)) {
    IntervalOptions opts = config.interval;
    opts.tau_divisor = config.smoothing.tau_interval_divisor;
    return fit_intervals(table, compute_intervals(ensemble, config.alpha), opts);
  }
  if (spec.uses(ObjectiveTag::Discriminative)) {
    SampleStackingOptions opts = config.sample;
    opts.seed = config.seed;
    return fit_sample_stacking(table, ensemble, opts);
  }
  MixtureOptions opts = config.mixture;
  opts.smoothing = config.smoothing;
  opts.smooth_rank = config.smooth_rank;
  if (config.local) return fit_local_mixture(table, ensemble, spec, opts);
  return fit_mixture(table, ensemble, spec, opts);
}

std::vector<std::string> fit_warnings(const StackedPosterior& posterior) {
  return std::visit(
      [](const auto& p) -> std::vector<std::string> {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, RawInference>) {
          return {};
        } else {
          return p.warnings;
        }
      },
      posterior);
}

std::uint64_t default_seed() {
  const char* env = std::getenv("SBSTACK_SEED");
  if (env == nullptr || *env == '\0') return 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') {
    throw ConfigurationError(std::string("SBSTACK_SEED is not an unsigned integer: '") + env + "'");
  }
  return v;
}

}  // namespace sbstack
