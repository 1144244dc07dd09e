#include "sbstack/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace sbstack {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

GaussianScenario single_truth(std::string name, GaussianComponent truth,
                              std::vector<GaussianComponent> inferences, Index n_sims,
                              Index n_draws, std::uint64_t seed) {
  GaussianScenario s;
  s.name = std::move(name);
  s.truth = {truth};
  s.truth_weights = {1.0};
  s.inferences = std::move(inferences);
  s.n_sims = n_sims;
  s.n_draws = n_draws;
  s.seed = seed;
  return s;
}

double log_sum_exp(const Eigen::ArrayXd& terms) {
  const double peak = terms.maxCoeff();
  if (peak == -std::numeric_limits<double>::infinity()) return peak;
  return peak + std::log((terms - peak).exp().sum());
}

// log of sum_c w_c N(x; m_c, s_c).
double mixture_log_density(const std::vector<GaussianComponent>& comps,
                           const std::vector<double>& weights, double y, double x) {
  Eigen::ArrayXd terms(static_cast<Index>(comps.size()));
  for (std::size_t c = 0; c < comps.size(); ++c) {
    terms[static_cast<Index>(c)] =
        weights[c] > 0.0
            ? std::log(weights[c]) + normal_log_density(x, comps[c].mean_at(y), comps[c].sd)
            : -std::numeric_limits<double>::infinity();
  }
  return log_sum_exp(terms);
}

double mixture_cdf(const std::vector<GaussianComponent>& comps, const std::vector<double>& weights,
                   double y, double x) {
  double total = 0.0;
  for (std::size_t c = 0; c < comps.size(); ++c) {
    total += weights[c] * normal_cdf((x - comps[c].mean_at(y)) / comps[c].sd);
  }
  return total;
}

std::pair<double, double> mixture_mean_var(const std::vector<GaussianComponent>& comps,
                                           const std::vector<double>& weights, double y) {
  double mean = 0.0;
  for (std::size_t c = 0; c < comps.size(); ++c) mean += weights[c] * comps[c].mean_at(y);
  double var = 0.0;
  for (std::size_t c = 0; c < comps.size(); ++c) {
    const double spread = comps[c].mean_at(y) - mean;
    var += weights[c] * (comps[c].sd * comps[c].sd + spread * spread);
  }
  return {mean, var};
}

// One-dimensional KL(p || q) at fixed y by the trapezoid rule over the
// bulk of p.
double kl_at(const GaussianScenario& s, const std::vector<double>& w, double y) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& c : s.truth) {
    lo = std::min(lo, c.mean_at(y) - 12.0 * c.sd);
    hi = std::max(hi, c.mean_at(y) + 12.0 * c.sd);
  }
  constexpr int kPoints = 4001;
  const double h = (hi - lo) / (kPoints - 1);
  double total = 0.0;
  for (int i = 0; i < kPoints; ++i) {
    const double x = lo + h * i;
    const double log_p = mixture_log_density(s.truth, s.truth_weights, y, x);
    const double log_q = mixture_log_density(s.inferences, w, y, x);
    const double term = std::exp(log_p) * (log_p - log_q);
    total += (i == 0 || i == kPoints - 1) ? 0.5 * term : term;
  }
  return total * h;
}

bool shared_slope(const GaussianScenario& s) {
  const double slope = s.truth.front().slope;
  auto same = [slope](const GaussianComponent& c) { return c.slope == slope; };
  return std::all_of(s.truth.begin(), s.truth.end(), same) &&
         std::all_of(s.inferences.begin(), s.inferences.end(), same);
}

}  // namespace

void GaussianScenario::check() const {
  if (truth.empty() || truth.size() != truth_weights.size()) {
    throw ParameterError("scenario truth needs matching components and weights");
  }
  if (inferences.empty()) throw ParameterError("scenario needs at least one inference");
  if (dim < 1 || n_sims < 1 || n_draws < 1) throw ParameterError("scenario extents must be positive");
  double total = 0.0;
  for (double w : truth_weights) {
    if (!(w >= 0.0)) throw ParameterError("scenario truth weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-10) throw ParameterError("scenario truth weights must sum to 1");
  auto bad_sd = [](const GaussianComponent& c) { return !(c.sd > 0.0) || !std::isfinite(c.sd); };
  if (std::any_of(truth.begin(), truth.end(), bad_sd) ||
      std::any_of(inferences.begin(), inferences.end(), bad_sd)) {
    throw ParameterError("scenario std-devs must be positive");
  }
  const double fractions[] = {train_fraction, validation_fraction, test_fraction};
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ParameterError("split fractions must lie in [0, 1]");
  }
  if (std::abs(train_fraction + validation_fraction + test_fraction - 1.0) > 1e-9) {
    throw ParameterError("split fractions must sum to 1");
  }
}

GaussianScenario four_corrupted_scenario(Index n_sims, Index n_draws, std::uint64_t seed) {
  return single_truth("four-corrupted", {0.0, 1.0, 1.0},
                      {{1.0, 1.0, 1.0}, {-1.0, 1.0, 1.0}, {0.0, 1.0, 0.56}, {0.5, 1.0, 2.45}},
                      n_sims, n_draws, seed);
}

GaussianScenario two_component_scenario(Index n_sims, Index n_draws, std::uint64_t seed) {
  GaussianScenario s;
  s.name = "two-component";
  s.truth = {{-1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}};
  s.truth_weights = {0.5, 0.5};
  s.inferences = {{-1.0, 1.0, 1.0}, {1.0, 1.0, 1.0}};
  s.n_sims = n_sims;
  s.n_draws = n_draws;
  s.seed = seed;
  return s;
}

GaussianScenario symmetric_bias_scenario(Index n_sims, Index n_draws, std::uint64_t seed) {
  return single_truth("symmetric-bias", {0.0, 1.0, 1.0}, {{1.0, 1.0, 1.0}, {-1.0, 1.0, 1.0}},
                      n_sims, n_draws, seed);
}

GaussianScenario exact_scenario(Index n_sims, Index n_draws, std::uint64_t seed) {
  return single_truth("exact", {0.0, 1.0, 1.0}, {{0.0, 1.0, 1.0}}, n_sims, n_draws, seed);
}

GaussianScenario moment_scenario(Index n_sims, Index n_draws, std::uint64_t seed) {
  return single_truth("moment", {0.0, 1.0, 1.0},
                      {{0.6, 1.0, 0.8}, {-0.6, 1.0, 0.8}, {1.0, 1.0, 1.5}}, n_sims, n_draws,
                      seed);
}

std::vector<std::string> scenario_names() {
  return {"four-corrupted", "two-component", "symmetric-bias", "exact", "moment"};
}

GaussianScenario named_scenario(const std::string& name, Index n_sims, Index n_draws,
                                std::uint64_t seed) {
  if (name == "four-corrupted") return four_corrupted_scenario(n_sims, n_draws, seed);
  if (name == "two-component") return two_component_scenario(n_sims, n_draws, seed);
  if (name == "symmetric-bias") return symmetric_bias_scenario(n_sims, n_draws, seed);
  if (name == "exact") return exact_scenario(n_sims, n_draws, seed);
  if (name == "moment") return moment_scenario(n_sims, n_draws, seed);
  throw ConfigurationError("unknown scenario '" + name + "'");
}

GeneratedData generate(const GaussianScenario& s) {
  s.check();
  const Index N = s.n_sims;
  const Index d = s.dim;
  const Index K = s.n_inferences();
  const Index S = s.n_draws;

  Eigen::MatrixXd theta(N, d);
  Eigen::MatrixXd y(N, d);
  PosteriorEnsemble ensemble(K, N, S, d);
  Eigen::MatrixXd log_q = Eigen::MatrixXd::Zero(K, N);
  std::discrete_distribution<std::size_t> pick(s.truth_weights.begin(), s.truth_weights.end());

  for (Index n = 0; n < N; ++n) {
    auto rng = row_stream(s.seed, static_cast<std::uint64_t>(n));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index j = 0; j < d; ++j) {
      y(n, j) = normal(rng);
      const GaussianComponent& c = s.truth[pick(rng)];
      theta(n, j) = c.mean_at(y(n, j)) + c.sd * normal(rng);
    }
    for (Index k = 0; k < K; ++k) {
      const GaussianComponent& q = s.inferences[static_cast<std::size_t>(k)];
      Eigen::MatrixXd& draws = ensemble.draws(k, n);
      for (Index i = 0; i < S; ++i) {
        for (Index j = 0; j < d; ++j) draws(i, j) = q.mean_at(y(n, j)) + q.sd * normal(rng);
      }
      for (Index j = 0; j < d; ++j) {
        log_q(k, n) += normal_log_density(theta(n, j), q.mean_at(y(n, j)), q.sd);
      }
    }
  }
  ensemble.set_log_q(std::move(log_q));

  std::vector<Index> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 shuffle_rng(splitmix64(s.seed ^ 0x5851f42d4c957f2dULL));
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const auto n_train = static_cast<std::size_t>(std::llround(s.train_fraction * static_cast<double>(N)));
  const auto n_val = std::min(
      static_cast<std::size_t>(std::llround(s.validation_fraction * static_cast<double>(N))),
      static_cast<std::size_t>(N) - n_train);
  std::vector<Split> split(static_cast<std::size_t>(N), Split::Test);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto row = static_cast<std::size_t>(order[i]);
    if (i < n_train) {
      split[row] = Split::Train;
    } else if (i < n_train + n_val) {
      split[row] = Split::Validation;
    }
  }
  return {SimulationTable(std::move(theta), std::move(y), std::move(split)), std::move(ensemble)};
}

double normal_log_density(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - kLogSqrt2Pi;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ParameterError("normal quantile needs p in (0, 1)");
  // Bracket then Newton on the CDF; the density never vanishes inside the bracket.
  double lo = -40.0;
  double hi = 40.0;
  double x = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double f = normal_cdf(x) - p;
    if (f > 0.0) {
      hi = x;
    } else {
      lo = x;
    }
    const double density = std::exp(normal_log_density(x, 0.0, 1.0));
    double next = x - f / density;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) < 1e-15 * (1.0 + std::abs(x))) return next;
    x = next;
  }
  return x;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> gauss_hermite(Index order) {
  if (order < 1) throw ParameterError("Gauss-Hermite order must be positive");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (Index i = 1; i < order; ++i) {
    jacobi(i, i - 1) = jacobi(i - 1, i) = std::sqrt(static_cast<double>(i) / 2.0);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  const double mass = std::sqrt(std::numbers::pi);
  Eigen::VectorXd weights = mass * eig.eigenvectors().row(0).transpose().array().square();
  return {eig.eigenvalues(), weights};
}

double kl_to_truth(const GaussianScenario& s, const SimplexWeights& weights) {
  s.check();
  if (weights.size() != s.n_inferences()) {
    throw DimensionError("kl_to_truth: weight count differs from inference count");
  }
  const std::vector<double> w(weights.values().data(), weights.values().data() + weights.size());
  const bool vertex = (weights.values().array() == 1.0).any();
  if (s.dim != 1 && !vertex) {
    throw ConfigurationError("kl_to_truth: mixture weights need a one-dimensional scenario");
  }
  double per_dim;
  if (shared_slope(s)) {
    per_dim = kl_at(s, w, 0.0);
  } else {
    const auto [nodes, gh] = gauss_hermite(40);
    per_dim = 0.0;
    for (Index i = 0; i < nodes.size(); ++i) {
      per_dim += gh[i] * kl_at(s, w, std::numbers::sqrt2 * nodes[i]);
    }
    per_dim /= std::sqrt(std::numbers::pi);
  }
  return per_dim * static_cast<double>(s.dim);
}

double kl_to_truth(const GaussianScenario& s, Index k) {
  return kl_to_truth(s, SimplexWeights::vertex(s.n_inferences(), k));
}

std::pair<double, double> true_quantiles(const GaussianScenario& s, double y, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ParameterError("alpha must lie in (0, 1)");
  const double p_lo = alpha / 2.0;
  const double p_hi = 1.0 - alpha / 2.0;
  if (s.truth.size() == 1) {
    const double m = s.truth.front().mean_at(y);
    const double sd = s.truth.front().sd;
    return {m + sd * normal_quantile(p_lo), m + sd * normal_quantile(p_hi)};
  }
  auto invert = [&](double p) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& c : s.truth) {
      lo = std::min(lo, c.mean_at(y) - 40.0 * c.sd);
      hi = std::max(hi, c.mean_at(y) + 40.0 * c.sd);
    }
    for (int i = 0; i < 200 && hi - lo > 1e-14 * (1.0 + std::abs(lo)); ++i) {
      const double mid = 0.5 * (lo + hi);
      if (mixture_cdf(s.truth, s.truth_weights, y, mid) < p) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    return 0.5 * (lo + hi);
  };
  return {invert(p_lo), invert(p_hi)};
}

std::pair<double, double> true_moments(const GaussianScenario& s, double y) {
  return mixture_mean_var(s.truth, s.truth_weights, y);
}

std::pair<double, double> mixture_moments_at(const GaussianScenario& s,
                                             const SimplexWeights& weights, double y) {
  if (weights.size() != s.n_inferences()) {
    throw DimensionError("mixture moments: weight count differs from inference count");
  }
  const std::vector<double> w(weights.values().data(), weights.values().data() + weights.size());
  return mixture_mean_var(s.inferences, w, y);
}

GridSearchResult grid_search_weights(Index n_inferences, double resolution,
                                     const std::function<double(const SimplexWeights&)>& objective) {
  if (n_inferences < 1 || n_inferences > 4) {
    throw ParameterError("grid search supports 1 to 4 inferences, got " + std::to_string(n_inferences));
  }
  if (!(resolution >= 0.01 - 1e-12 && resolution <= 1.0)) {
    throw ParameterError("grid resolution must lie in [0.01, 1]");
  }
  const double steps_real = 1.0 / resolution;
  const long steps = std::lround(steps_real);
  if (std::abs(steps_real - static_cast<double>(steps)) > 1e-9 * steps_real) {
    throw ParameterError("grid resolution must divide 1 evenly");
  }

  std::optional<GridSearchResult> best;
  Index evaluated = 0;
  std::vector<long> counts(static_cast<std::size_t>(n_inferences), 0);
  // Enumerate compositions of `steps` into K parts, last part implied.
  std::function<void(std::size_t, long)> visit = [&](std::size_t k, long left) {
    if (k + 1 == counts.size()) {
      counts[k] = left;
      Eigen::VectorXd w(n_inferences);
      for (std::size_t i = 0; i < counts.size(); ++i) {
        w[static_cast<Index>(i)] = static_cast<double>(counts[i]) / static_cast<double>(steps);
      }
      SimplexWeights candidate(w);
      const double value = objective(candidate);
      ++evaluated;
      if (!best || value < best->value) best = GridSearchResult{candidate, value, 0};
      return;
    }
    for (long c = left; c >= 0; --c) {
      counts[k] = c;
      visit(k + 1, left - c);
    }
  };
  visit(0, steps);
  best->evaluated = evaluated;
  return *best;
}

}  // namespace sbstack
