#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/math/distributions/normal.hpp>

#include "shiftshare/data.hpp"
#include "shiftshare/estimate.hpp"
#include "shiftshare/numeric.hpp"
#include "shiftshare/rinfer.hpp"

namespace shiftshare {

struct DgpConfig {
  Index n = 200;
  Index m = 50;
  double beta_true = 1.0;

  std::string share_model = "dirichlet";  // dirichlet | sparse_block | network
  double dirichlet_alpha = 1.0;
  Index share_support = 0;  // nonzero shifts per unit, 0 = all
  Index blocks = 10;
  Index network_k = 2;      // ring-lattice degree (even)
  double network_p = 0.0;   // extra random edge probability
  double share_min_total = 1.0;  // row totals drawn from U(share_min_total, 1)

  std::string shift_model = "normal";  // normal | clustered | exchangeable
  double shift_mean = 0.0;
  double shift_sd = 1.0;
  double shift_rho = 0.0;
  Index shift_cluster_size = 5;
  Index exchange_groups = 1;
  double group_spread = 0.0;

  std::string error_model = "iid";  // iid | share_correlated
  double error_sd = 1.0;
  double share_error_fraction = 0.5;

  double pi_mean = 1.0;
  double pi_sd = 0.0;
  double first_stage_sd = 1.0;
  double endogeneity = 0.5;  // correlation of v_i with the error

  std::string weight_model = "equal";  // equal | random

  std::uint64_t seed = 1;
  std::int64_t replications = 1000;
  std::vector<std::string> estimators{"unit_conventional", "exposure_robust"};
  double level = 0.95;
  std::optional<double> null_beta;  // defaults to beta_true
  std::int64_t ri_draws = 500;

  void validate() const {
    if (n < 2 || m < 1) throw ValidationError("simulation needs n >= 2 and m >= 1");
    if (!(dirichlet_alpha > 0.0)) throw ValidationError("dirichlet_alpha must be positive");
    if (share_support < 0 || share_support > m) throw ValidationError("share_support must lie in [0, m]");
    if (share_model == "sparse_block" && (blocks < 1 || blocks > m || blocks > n)) throw ValidationError("blocks must lie in [1, min(n, m)]");
    if (share_model == "network") {
      if (n != m) throw ValidationError("network shares need n == m (units are nodes)");
      if (network_k < 0 || network_k % 2 != 0 || network_k >= n) throw ValidationError("network_k must be even and below n");
      if (network_p < 0.0 || network_p > 1.0) throw ValidationError("network_p must lie in [0, 1]");
    }
    if (share_model != "dirichlet" && share_model != "sparse_block" && share_model != "network") {
      throw ValidationError("unknown share_model '" + share_model + "'");
    }
    if (!(share_min_total > 0.0 && share_min_total <= 1.0)) throw ValidationError("share_min_total must lie in (0, 1]");
    if (shift_model != "normal" && shift_model != "clustered" && shift_model != "exchangeable") {
      throw ValidationError("unknown shift_model '" + shift_model + "'");
    }
    if (!(shift_rho >= 0.0 && shift_rho < 1.0)) throw ValidationError("shift_rho must lie in [0, 1)");
    if (shift_cluster_size < 1) throw ValidationError("shift_cluster_size must be positive");
    if (exchange_groups < 1 || exchange_groups > m) throw ValidationError("exchange_groups must lie in [1, m]");
    if (!(shift_sd >= 0.0) || !(error_sd >= 0.0) || !(first_stage_sd >= 0.0) || !(pi_sd >= 0.0)) {
      throw ValidationError("standard deviations must be non-negative");
    }
    if (error_model != "iid" && error_model != "share_correlated") throw ValidationError("unknown error_model '" + error_model + "'");
    if (!(share_error_fraction >= 0.0 && share_error_fraction <= 1.0)) throw ValidationError("share_error_fraction must lie in [0, 1]");
    if (!(endogeneity >= -1.0 && endogeneity <= 1.0)) throw ValidationError("endogeneity must lie in [-1, 1]");
    if (weight_model != "equal" && weight_model != "random") throw ValidationError("unknown weight_model '" + weight_model + "'");
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("level must lie in (0, 1)");
    if (replications < 1) throw ValidationError("replications must be positive");
    if (ri_draws < 1) throw ValidationError("ri_draws must be positive");
  }

  /// Canonical key=value rendering; parse(to_text()) round-trips.
  std::string to_text() const {
    std::ostringstream out;
    auto put = [&](const std::string& k, const std::string& v) { out << k << " = " << v << "\n"; };
    auto num = [](double v) { return detail::format_double(v); };
    put("n", std::to_string(n));
    put("m", std::to_string(m));
    put("beta_true", num(beta_true));
    put("share_model", share_model);
    put("dirichlet_alpha", num(dirichlet_alpha));
    put("share_support", std::to_string(share_support));
    put("blocks", std::to_string(blocks));
    put("network_k", std::to_string(network_k));
    put("network_p", num(network_p));
    put("share_min_total", num(share_min_total));
    put("shift_model", shift_model);
    put("shift_mean", num(shift_mean));
    put("shift_sd", num(shift_sd));
    put("shift_rho", num(shift_rho));
    put("shift_cluster_size", std::to_string(shift_cluster_size));
    put("exchange_groups", std::to_string(exchange_groups));
    put("group_spread", num(group_spread));
    put("error_model", error_model);
    put("error_sd", num(error_sd));
    put("share_error_fraction", num(share_error_fraction));
    put("pi_mean", num(pi_mean));
    put("pi_sd", num(pi_sd));
    put("first_stage_sd", num(first_stage_sd));
    put("endogeneity", num(endogeneity));
    put("weight_model", weight_model);
    put("seed", std::to_string(seed));
    put("replications", std::to_string(replications));
    put("estimators", boost::algorithm::join(estimators, ","));
    put("level", num(level));
    if (null_beta) put("null_beta", num(*null_beta));
    put("ri_draws", std::to_string(ri_draws));
    return out.str();
  }

  /// Plain `key = value` lines; `#` starts a comment. Unknown keys are errors.
  static DgpConfig parse(const std::string& text) {
    DgpConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      boost::algorithm::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = boost::algorithm::trim_copy(line.substr(0, eq));
      std::string value = boost::algorithm::trim_copy(line.substr(eq + 1));
      c.set(key, value, lineno);
    }
    c.validate();
    return c;
  }

  static DgpConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file '" + path + "'");
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
  }

  void set(const std::string& key, const std::string& value, int lineno = 0) {
    const std::string where = lineno > 0 ? "config line " + std::to_string(lineno) + ": " : "";
    auto real = [&]() {
      auto v = detail::parse_double(value);
      if (!v) throw ValidationError(where + "'" + key + "' expects a number, got '" + value + "'");
      return *v;
    };
    auto integer = [&]() -> std::int64_t {
      const double v = real();
      if (v != std::floor(v)) throw ValidationError(where + "'" + key + "' expects an integer, got '" + value + "'");
      return static_cast<std::int64_t>(v);
    };
    if (key == "n") n = integer();
    else if (key == "m") m = integer();
    else if (key == "beta_true") beta_true = real();
    else if (key == "share_model") share_model = value;
    else if (key == "dirichlet_alpha") dirichlet_alpha = real();
    else if (key == "share_support") share_support = integer();
    else if (key == "blocks") blocks = integer();
    else if (key == "network_k") network_k = integer();
    else if (key == "network_p") network_p = real();
    else if (key == "share_min_total") share_min_total = real();
    else if (key == "shift_model") shift_model = value;
    else if (key == "shift_mean") shift_mean = real();
    else if (key == "shift_sd") shift_sd = real();
    else if (key == "shift_rho") shift_rho = real();
    else if (key == "shift_cluster_size") shift_cluster_size = integer();
    else if (key == "exchange_groups") exchange_groups = integer();
    else if (key == "group_spread") group_spread = real();
    else if (key == "error_model") error_model = value;
    else if (key == "error_sd") error_sd = real();
    else if (key == "share_error_fraction") share_error_fraction = real();
    else if (key == "pi_mean") pi_mean = real();
    else if (key == "pi_sd") pi_sd = real();
    else if (key == "first_stage_sd") first_stage_sd = real();
    else if (key == "endogeneity") endogeneity = real();
    else if (key == "weight_model") weight_model = value;
    else if (key == "seed") seed = static_cast<std::uint64_t>(integer());
    else if (key == "replications") replications = integer();
    else if (key == "estimators") {
      estimators.clear();
      boost::algorithm::split(estimators, value, boost::is_any_of(", "), boost::token_compress_on);
      estimators.erase(std::remove(estimators.begin(), estimators.end(), ""), estimators.end());
    } else if (key == "level") level = real();
    else if (key == "null_beta") null_beta = real();
    else if (key == "ri_draws") ri_draws = integer();
    else throw ValidationError(where + "unknown config key '" + key + "'");
  }
};

struct SimulationTruth {
  double beta_true = kNaN;
  Vector u;                // latent shift-level error shocks
  ShareMatrix::Sparse pi;  // first-stage coefficients on the share pattern
  Vector epsilon;
  Vector v;
};

struct Simulated {
  ShareMatrix shares;
  ShiftTable shifts;
  Dataset data;
  SimulationTruth truth;
};

namespace detail {

enum StreamRole : std::uint64_t { kShareStream = 1, kShiftStream = 2, kErrorStream = 3, kFirstStageStream = 4, kWeightStream = 5 };

inline std::vector<double> dirichlet(RandomStream& rng, std::size_t k, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> g(k);
  double total = 0.0;
  // Redraw the (astronomically unlikely) all-zero vector from tiny alphas.
  do {
    total = 0.0;
    for (auto& v : g) {
      v = gamma(rng);
      total += v;
    }
  } while (!(total > 0.0));
  for (auto& v : g) v /= total;
  return g;
}

inline ShareMatrix simulate_shares(const DgpConfig& c, RandomStream& rng, Labels* unit_cluster) {
  std::vector<ShareMatrix::Entry> entries;
  const Index n = c.n, m = c.m;
  unit_cluster->assign(static_cast<std::size_t>(n), "all");
  if (c.share_model == "network") {
    std::vector<std::set<Index>> adj(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      for (Index d = 1; d <= c.network_k / 2; ++d) {
        adj[static_cast<std::size_t>(i)].insert((i + d) % n);
        adj[static_cast<std::size_t>((i + d) % n)].insert(i);
      }
    }
    if (c.network_p > 0.0) {
      for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j) {
          if (rng.uniform() < c.network_p) {
            adj[static_cast<std::size_t>(i)].insert(j);
            adj[static_cast<std::size_t>(j)].insert(i);
          }
        }
      }
    }
    for (Index i = 0; i < n; ++i) {
      const auto& nb = adj[static_cast<std::size_t>(i)];
      for (Index j : nb) entries.push_back({i, j, 1.0 / static_cast<double>(nb.size())});
    }
  } else {
    for (Index i = 0; i < n; ++i) {
      std::vector<Index> support;
      if (c.share_model == "sparse_block") {
        const Index b = i % c.blocks;
        const Index lo = b * m / c.blocks, hi = (b + 1) * m / c.blocks;
        for (Index j = lo; j < hi; ++j) support.push_back(j);
        (*unit_cluster)[static_cast<std::size_t>(i)] = "b" + std::to_string(b);
      } else {
        support.resize(static_cast<std::size_t>(m));
        std::iota(support.begin(), support.end(), Index{0});
      }
      if (c.share_support > 0 && c.share_support < static_cast<Index>(support.size())) {
        shuffle_with(support.begin(), support.end(), rng);
        support.resize(static_cast<std::size_t>(c.share_support));
        std::sort(support.begin(), support.end());
      }
      const auto g = dirichlet(rng, support.size(), c.dirichlet_alpha);
      const double total = c.share_min_total < 1.0 ? c.share_min_total + (1.0 - c.share_min_total) * rng.uniform() : 1.0;
      for (std::size_t k = 0; k < support.size(); ++k) {
        if (g[k] > 0.0) entries.push_back({i, support[k], g[k] * total});
      }
    }
  }
  return ShareMatrix(ShareMatrix::make_ids("u", n), ShareMatrix::make_ids("s", m), entries);
}

inline ShiftTable simulate_shifts(const DgpConfig& c, RandomStream& rng) {
  const Index m = c.m;
  Vector d(m);
  Labels cluster, group;
  if (c.shift_model == "clustered") {
    const Index k = (m + c.shift_cluster_size - 1) / c.shift_cluster_size;
    std::vector<double> common(static_cast<std::size_t>(k));
    for (auto& v : common) v = rng.normal();
    for (Index j = 0; j < m; ++j) {
      const Index cl = j / c.shift_cluster_size;
      d[j] = c.shift_mean + c.shift_sd * (std::sqrt(c.shift_rho) * common[static_cast<std::size_t>(cl)] +
                                          std::sqrt(1.0 - c.shift_rho) * rng.normal());
      cluster.push_back("k" + std::to_string(cl));
    }
  } else {
    for (Index j = 0; j < m; ++j) cluster.push_back("k" + std::to_string(j / c.shift_cluster_size));
    for (Index j = 0; j < m; ++j) {
      const Index g = c.shift_model == "exchangeable" ? j % c.exchange_groups : 0;
      const double offset = c.shift_model == "exchangeable"
                                ? c.group_spread * (static_cast<double>(g) - 0.5 * static_cast<double>(c.exchange_groups - 1))
                                : 0.0;
      d[j] = c.shift_mean + offset + c.shift_sd * rng.normal();
    }
  }
  for (Index j = 0; j < m; ++j) {
    group.push_back("g" + std::to_string(c.shift_model == "exchangeable" ? j % c.exchange_groups : 0));
  }
  ShiftTable t = ShiftTable::from_values(d);
  t.cluster = cluster;
  t.exchange_group = group;
  return t;
}

}  // namespace detail

/// One draw from the data-generating process. Each replication and role
/// (shares, shifts, errors, first stage, weights) has its own stream.
///
///   X_i = Σ_j w_ij π_ij D_j + v_i,   Y_i = β X_i + ε_i
///   ε_i = a Σ_j w_ij u_j + b ν_i  (share_correlated; a = 0 for iid)
///
/// a and b are set so the share component carries share_error_fraction of
/// the average error variance error_sd².
inline Simulated generate(const DgpConfig& c, std::int64_t replication = 0) {
  c.validate();
  const auto rep = static_cast<std::uint64_t>(replication);
  RandomStream share_rng(c.seed, rep, detail::kShareStream);
  RandomStream shift_rng(c.seed, rep, detail::kShiftStream);
  RandomStream error_rng(c.seed, rep, detail::kErrorStream);
  RandomStream fs_rng(c.seed, rep, detail::kFirstStageStream);
  RandomStream weight_rng(c.seed, rep, detail::kWeightStream);

  Simulated s;
  Labels unit_cluster;
  s.shares = detail::simulate_shares(c, share_rng, &unit_cluster);
  s.shifts = detail::simulate_shifts(c, shift_rng);
  const Index n = c.n, m = c.m;
  const auto& w = s.shares.weights();

  s.truth.beta_true = c.beta_true;
  s.truth.u = Vector::Zero(m);
  Vector common = Vector::Zero(n);
  double a = 0.0, b = c.error_sd;
  if (c.error_model == "share_correlated") {
    for (Index j = 0; j < m; ++j) s.truth.u[j] = error_rng.normal();
    common = s.shares.apply(s.truth.u);
    CompensatedSum sq;
    for (Index i = 0; i < n; ++i) {
      for (ShareMatrix::Sparse::InnerIterator it(w, i); it; ++it) sq += it.value() * it.value();
    }
    const double mean_sq = sq.value() / static_cast<double>(n);
    a = mean_sq > 0.0 ? c.error_sd * std::sqrt(c.share_error_fraction / mean_sq) : 0.0;
    b = c.error_sd * std::sqrt(1.0 - c.share_error_fraction);
  }
  s.truth.epsilon = Vector(n);
  for (Index i = 0; i < n; ++i) s.truth.epsilon[i] = a * common[i] + b * error_rng.normal();

  s.truth.pi = w;
  Vector x(n);
  s.truth.v = Vector(n);
  const double rho = c.endogeneity;
  for (Index i = 0; i < n; ++i) {
    CompensatedSum xi;
    ShareMatrix::Sparse::InnerIterator wit(w, i);
    for (ShareMatrix::Sparse::InnerIterator it(s.truth.pi, i); it; ++it, ++wit) {
      const double pi = c.pi_mean + c.pi_sd * fs_rng.normal();
      xi += wit.value() * pi * s.shifts.values[it.col()];
      it.valueRef() = pi;
    }
    const double eps_std = c.error_sd > 0.0 ? s.truth.epsilon[i] / c.error_sd : 0.0;
    s.truth.v[i] = c.first_stage_sd * (rho * eps_std + std::sqrt(1.0 - rho * rho) * fs_rng.normal());
    x[i] = xi.value() + s.truth.v[i];
  }
  const Vector y = c.beta_true * x + s.truth.epsilon;
  Vector weights = Vector::Ones(n);
  if (c.weight_model == "random") {
    for (Index i = 0; i < n; ++i) weights[i] = 0.5 + 1.5 * weight_rng.uniform();
  }
  s.data = Dataset::make(s.shares.row_ids(), y, x, Matrix(), {}, weights);
  s.data.labels["cluster"] = unit_cluster;
  return s;
}

// ---------------------------------------------------------------------------

struct CoverageResult {
  std::string estimator;
  std::int64_t replications = 0;
  std::int64_t failures = 0;
  double mean_bias = kNaN;
  double sd_beta = kNaN;
  double mean_se = kNaN;
  double coverage = kNaN;
  double rejection_rate = kNaN;  // of β = null_beta at 1 - level
};

inline const std::vector<std::string>& known_estimators() {
  static const std::vector<std::string> names{"unit_conventional", "unit_cluster",     "exposure_robust", "exposure_cluster",
                                              "residualized",      "residualized_cluster", "ri"};
  return names;
}

namespace detail {

struct Draw {
  bool ok = false;
  double beta = kNaN;
  double se = kNaN;
  bool covered = false;
  bool rejected = false;
};

inline std::string se_key(const std::string& estimator) {
  if (estimator == "unit_conventional" || estimator == "unit_cluster") return kSeConventional;
  if (estimator == "exposure_robust") return kSeExposureHc;
  if (estimator == "exposure_cluster") return kSeExposureCluster;
  if (estimator == "residualized") return kSeResidualized;
  if (estimator == "residualized_cluster") return kSeResidualizedCluster;
  throw ValidationError("unknown estimator '" + estimator + "'");
}

}  // namespace detail

/// Monte Carlo over `replications` independent draws; every estimator sees
/// the same data within a replication. Failed fits are counted and excluded.
inline std::vector<CoverageResult> run_coverage(const DgpConfig& config) {
  config.validate();
  for (const auto& e : config.estimators) {
    if (std::find(known_estimators().begin(), known_estimators().end(), e) == known_estimators().end()) {
      throw ValidationError("unknown estimator '" + e + "' (known: " + boost::algorithm::join(known_estimators(), ", ") + ")");
    }
  }
  if (config.estimators.empty()) throw ValidationError("no estimators requested");
  if (config.replications < 100) throw ValidationError("coverage runs need at least 100 replications");
  const auto has = [&](const std::string& e) {
    return std::find(config.estimators.begin(), config.estimators.end(), e) != config.estimators.end();
  };
  const double crit = boost::math::quantile(boost::math::complement(boost::math::normal(), (1.0 - config.level) / 2.0));
  const double null_beta = config.null_beta.value_or(config.beta_true);
  const std::size_t k = config.estimators.size();
  const auto reps = config.replications;
  std::vector<detail::Draw> draws(static_cast<std::size_t>(reps) * k);

#pragma omp parallel for schedule(dynamic)
  for (std::int64_t r = 0; r < reps; ++r) {
    const auto sim = generate(config, r);
    std::optional<ShiftFrameworkResult> framework, clustered;
    const bool need_framework = std::any_of(config.estimators.begin(), config.estimators.end(),
                                            [](const std::string& e) { return e != "ri" && e != "unit_cluster"; });
    try {
      if (need_framework) {
        ShiftFrameworkOptions opts;
        if (has("exposure_cluster") || has("residualized_cluster")) opts.shift_cluster = "cluster";
        framework = analyze_shift_framework(sim.data, sim.shares, sim.shifts, opts);
      }
    } catch (const std::exception&) {
      framework.reset();
    }
    try {
      if (has("unit_cluster")) {
        ShiftFrameworkOptions opts;
        opts.unit_clusters = sim.data.labels.at("cluster");
        clustered = analyze_shift_framework(sim.data, sim.shares, sim.shifts, opts);
      }
    } catch (const std::exception&) {
      clustered.reset();
    }
    for (std::size_t e = 0; e < k; ++e) {
      const auto& name = config.estimators[e];
      auto& d = draws[static_cast<std::size_t>(r) * k + e];
      try {
        if (name == "ri") {
          RiOptions ro;
          ro.draws = config.ri_draws;
          ro.seed = config.seed ^ (0x5249ULL + static_cast<std::uint64_t>(r) * 0x9E3779B97F4A7C15ULL);
          ro.level = config.level;
          ro.enumeration = Enumeration::never;
          Controls controls = unit_controls(sim.data);
          if (!sim.shares.is_complete()) controls.append(sim.shares.row_sums(), "share_sum");
          const RandomizationDesign design(sim.data, sim.shares, sim.shifts, controls, ro);
          d.beta = design.point_estimate();
          const double alpha = 1.0 - config.level;
          d.covered = design.p_value(config.beta_true) > alpha;
          d.rejected = design.p_value(null_beta) <= alpha;
          d.ok = std::isfinite(d.beta);
          continue;
        }
        const auto& src = name == "unit_cluster" ? clustered : framework;
        if (!src) continue;
        const auto& rep = src->report;
        d.beta = rep.beta_hat;
        d.se = rep.se.at(detail::se_key(name));
        d.covered = std::abs(d.beta - config.beta_true) <= crit * d.se;
        d.rejected = std::abs(d.beta - null_beta) > crit * d.se;
        d.ok = std::isfinite(d.beta) && std::isfinite(d.se);
      } catch (const std::exception&) {
        d.ok = false;
      }
    }
  }

  std::vector<CoverageResult> out;
  for (std::size_t e = 0; e < k; ++e) {
    CoverageResult c;
    c.estimator = config.estimators[e];
    c.replications = reps;
    CompensatedSum bias, se, covered, rejected;
    std::int64_t ok = 0;
    for (std::int64_t r = 0; r < reps; ++r) {
      const auto& d = draws[static_cast<std::size_t>(r) * k + e];
      if (!d.ok) continue;
      ++ok;
      bias += d.beta - config.beta_true;
      se += d.se;
      covered += d.covered ? 1.0 : 0.0;
      rejected += d.rejected ? 1.0 : 0.0;
    }
    c.failures = reps - ok;
    if (ok > 0) {
      const double okd = static_cast<double>(ok);
      c.mean_bias = bias.value() / okd;
      c.mean_se = c.estimator == "ri" ? kNaN : se.value() / okd;
      c.coverage = covered.value() / okd;
      c.rejection_rate = rejected.value() / okd;
      if (ok > 1) {
        CompensatedSum ss;
        const double mean_beta = config.beta_true + c.mean_bias;
        for (std::int64_t r = 0; r < reps; ++r) {
          const auto& d = draws[static_cast<std::size_t>(r) * k + e];
          if (d.ok) ss += (d.beta - mean_beta) * (d.beta - mean_beta);
        }
        c.sd_beta = std::sqrt(ss.value() / (okd - 1.0));
      }
    }
    out.push_back(c);
  }
  return out;
}

inline std::string coverage_csv(const std::vector<CoverageResult>& results) {
  std::ostringstream out;
  out << "estimator,replications,failures,mean_bias,sd_beta,mean_se,coverage,rejection_rate\n";
  auto num = [](double v) { return std::isfinite(v) ? detail::format_double(v) : std::string("NA"); };
  for (const auto& c : results) {
    out << c.estimator << ',' << c.replications << ',' << c.failures << ',' << num(c.mean_bias) << ',' << num(c.sd_beta) << ','
        << num(c.mean_se) << ',' << num(c.coverage) << ',' << num(c.rejection_rate) << '\n';
  }
  return out.str();
}

}  // namespace shiftshare
