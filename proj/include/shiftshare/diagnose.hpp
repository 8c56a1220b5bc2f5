#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "shiftshare/construct.hpp"
#include "shiftshare/data.hpp"
#include "shiftshare/estimate.hpp"
#include "shiftshare/numeric.hpp"

namespace shiftshare {

struct BalanceResult {
  double coefficient = kNaN;
  double se = kNaN;
  std::string se_variant;
  double t_stat = kNaN;
  double p_value = kNaN;  // two-sided, normal approximation
  Index n = 0;
  bool degenerate = false;
  Labels warnings;
};

namespace detail {

inline double normal_two_sided(double t) {
  if (!std::isfinite(t)) return std::isnan(t) ? kNaN : 0.0;
  return 2.0 * boost::math::cdf(boost::math::complement(boost::math::normal(), std::abs(t)));
}

inline void finish_balance(BalanceResult& r) {
  if (r.se > 0.0) {
    r.t_stat = r.coefficient / r.se;
    r.p_value = normal_two_sided(r.t_stat);
  } else if (r.coefficient == 0.0) {
    r.t_stat = 0.0;
    r.p_value = 1.0;
  }
}

inline bool no_variation(const Vector& resid, const Vector& raw, const Vector& w) {
  const double rr = weighted_dot(w, resid, resid);
  const double scale = std::max(weighted_dot(w, raw, raw), 1e-300);
  return rr <= 1e-24 * scale;
}

}  // namespace detail

/// Exposure-robust SE inputs for unit-level balance tests: the share
/// matrix and the residualized shifts defining the instrument.
struct ExposureInputs {
  ShareMatrix shares;
  Vector eta;
  std::optional<Labels> shift_clusters;
};

struct UnitBalanceOptions {
  bool normalize = false;  // scale the shift-share variable to weighted variance 1
  std::optional<Labels> unit_clusters;
  std::optional<ExposureInputs> exposure;  // exposure-robust SE when set
  bool conventional = false;               // force conventional SE even with exposure inputs
};

/// Regression of a unit-level placebo T_i on the shift-share variable with
/// controls. With `instrument` set the shift-share variable is instrumented.
inline BalanceResult balance_test_unit(const Dataset& data, const Vector& placebo, const Vector& shiftshare_variable,
                                       const Controls& controls, const UnitBalanceOptions& opts = {},
                                       const std::optional<Vector>& instrument = std::nullopt) {
  const Index n = data.size();
  if (placebo.size() != n || shiftshare_variable.size() != n) throw ValidationError("placebo or regressor length differs from unit count");
  if (!placebo.allFinite()) throw ValidationError("placebo column contains non-finite values");
  const Vector& e = data.unit_weights;
  Vector x = shiftshare_variable;
  Vector z = instrument ? *instrument : shiftshare_variable;
  if (opts.normalize) {
    const double sd = weighted_sd(x, e);
    if (!(sd > 0.0)) throw NumericalError("shift-share variable has zero variance; cannot normalize");
    x /= sd;
    if (!instrument) z = x;
  }
  BalanceResult r;
  r.n = n;
  Dataset d = data;
  d.outcome = placebo;
  d.regressor = x;

  const WeightedProjector projector(controls.values, e, controls.names);
  if (detail::no_variation(projector.residualize(placebo), placebo, e)) {
    // Rank check still applies, then report the degenerate fit.
    Matrix full(n, controls.cols() + 1);
    full << x, controls.values;
    Labels names{"x"};
    names.insert(names.end(), controls.names.begin(), controls.names.end());
    WeightedProjector check(full, e, names);
    r.coefficient = 0.0;
    r.se = 0.0;
    r.degenerate = true;
    r.se_variant = opts.exposure && !opts.conventional ? kSeResidualized : kSeConventional;
    r.warnings.push_back("placebo has no variation after controls");
    detail::finish_balance(r);
    return r;
  }
  const auto report = unit_level_report(d, x, z, controls, opts.unit_clusters, instrument ? "2sls" : "ols");
  r.coefficient = report.beta_hat;
  if (opts.exposure && !opts.conventional) {
    const auto& ex = *opts.exposure;
    if (ex.shift_clusters) {
      r.se = residualized_se_clustered(e, ex.shares, ex.eta, report.residuals, report.x_perp, *ex.shift_clusters);
      r.se_variant = kSeResidualizedCluster;
    } else {
      r.se = residualized_se(e, ex.shares, ex.eta, report.residuals, report.x_perp);
      r.se_variant = kSeResidualized;
    }
  } else {
    r.se = report.se.at(kSeConventional);
    r.se_variant = kSeConventional;
  }
  detail::finish_balance(r);
  return r;
}

/// Shift-level placebo from a unit-level column: Σ_i e_i w_ij T_i / w_j.
/// Shifts with w_j = 0 get NaN.
inline Vector aggregate_to_shifts(const ShareMatrix& shares, const Vector& unit_weights, const Vector& values) {
  const Vector w = shares.shift_weights(unit_weights);
  const Vector num = shares.apply_transpose(unit_weights.cwiseProduct(values));
  Vector out(w.size());
  for (Index j = 0; j < w.size(); ++j) out[j] = w[j] > 0.0 ? num[j] / w[j] : kNaN;
  return out;
}

struct ShiftBalanceOptions {
  ResidualizationSpec spec = ResidualizationSpec::parse("1");
  std::optional<Labels> shift_clusters;
};

/// w_j-weighted regression of residualized shifts η̂_j on a shift-level
/// placebo (with intercept). Cluster-robust by c(j) when labels are given,
/// HC1 otherwise. Shifts with zero weight or missing placebo are dropped.
inline BalanceResult balance_test_shift(const Vector& placebo, const ShiftTable& shifts, const Vector& shift_weights,
                                        const ShiftBalanceOptions& opts = {}) {
  const Index m = shifts.size();
  if (placebo.size() != m || shift_weights.size() != m) throw ValidationError("placebo, shifts and weights are misaligned");
  const auto resid = residualize_shifts(shifts, opts.spec, shift_weights);
  std::vector<Index> keep;
  for (Index j = 0; j < m; ++j) {
    if (shift_weights[j] > 0.0 && std::isfinite(placebo[j])) keep.push_back(j);
  }
  BalanceResult r;
  r.n = static_cast<Index>(keep.size());
  if (r.n < static_cast<Index>(m)) {
    r.warnings.push_back(std::to_string(m - r.n) + " shifts dropped (zero weight or missing placebo)");
  }
  if (r.n < 3) throw ValidationError("shift balance test needs at least 3 shifts with positive weight");
  Vector t(r.n), eta(r.n), w(r.n);
  std::optional<Labels> clusters;
  if (opts.shift_clusters) {
    if (static_cast<Index>(opts.shift_clusters->size()) != m) throw ValidationError("shift cluster labels have the wrong length");
    clusters = Labels();
  }
  for (Index k = 0; k < r.n; ++k) {
    const Index j = keep[static_cast<std::size_t>(k)];
    t[k] = placebo[j];
    eta[k] = resid.eta_hat[j];
    w[k] = shift_weights[j];
    if (clusters) clusters->push_back((*opts.shift_clusters)[static_cast<std::size_t>(j)]);
  }
  w /= compensated_sum(w);
  const Matrix ones = Matrix::Ones(r.n, 1);
  const WeightedProjector projector(ones, w, {"(intercept)"});
  const Vector t_perp = projector.residualize(t);
  r.se_variant = clusters ? kSeExposureCluster : kSeExposureHc;
  if (detail::no_variation(t_perp, t, w)) {
    r.coefficient = 0.0;
    r.se = 0.0;
    r.degenerate = true;
    r.warnings.push_back("placebo has no variation across shifts");
    detail::finish_balance(r);
    return r;
  }
  const Vector eta_perp = projector.residualize(eta);
  const double den = weighted_dot(w, t_perp, t_perp);
  r.coefficient = weighted_dot(w, t_perp, eta_perp) / den;
  const Vector u = eta_perp - r.coefficient * t_perp;
  Index groups = 0;
  r.se = detail::conventional_se(w, t_perp, u, den, clusters, 2, &groups);
  detail::finish_balance(r);
  return r;
}

// ---------------------------------------------------------------------------

struct AutocorrelationResult {
  int lag = 1;
  double correlation = kNaN;
  double p_value = kNaN;  // two-sided t-test with pairs - 2 df
  Index pairs = 0;
};

namespace detail {

// Period labels in chronological order: numeric when every label parses,
// lexical otherwise.
inline std::vector<std::string> ordered_periods(const Labels& periods) {
  std::vector<std::string> distinct(periods.begin(), periods.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  const bool numeric = std::all_of(distinct.begin(), distinct.end(), [](const std::string& s) { return parse_double(s).has_value(); });
  if (numeric) {
    std::sort(distinct.begin(), distinct.end(), [](const std::string& a, const std::string& b) { return *parse_double(a) < *parse_double(b); });
  }
  return distinct;
}

}  // namespace detail

inline AutocorrelationResult correlation_test(const std::vector<double>& a, const std::vector<double>& b, int lag = 0) {
  AutocorrelationResult r;
  r.lag = lag;
  r.pairs = static_cast<Index>(a.size());
  if (a.size() != b.size()) throw ValidationError("correlation inputs differ in length");
  if (r.pairs < 3) throw ValidationError("autocorrelation needs at least 3 overlapping pairs, found " + std::to_string(r.pairs));
  CompensatedSum sa, sb;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sa += a[k];
    sb += b[k];
  }
  const double ma = sa.value() / static_cast<double>(a.size()), mb = sb.value() / static_cast<double>(b.size());
  CompensatedSum sab, saa, sbb;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  if (!(saa.value() > 0.0) || !(sbb.value() > 0.0)) throw NumericalError("autocorrelation undefined: a series has no variation");
  r.correlation = std::clamp(sab.value() / std::sqrt(saa.value() * sbb.value()), -1.0, 1.0);
  const double df = static_cast<double>(r.pairs - 2);
  if (std::abs(r.correlation) >= 1.0 - 1e-15) {
    r.p_value = 0.0;
  } else if (df > 0) {
    const double t = r.correlation * std::sqrt(df / (1.0 - r.correlation * r.correlation));
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(df), std::abs(t)));
  }
  return r;
}

/// Pooled correlation of (D_{j,t}, D_{j,t-lag}) over a shift panel; `series`
/// identifies j and `period` identifies t. Lags count distinct periods.
inline AutocorrelationResult autocorrelation(const Vector& values, const Labels& series, const Labels& periods, int lag) {
  if (lag < 1) throw ValidationError("lag must be at least 1");
  if (static_cast<Index>(series.size()) != values.size() || static_cast<Index>(periods.size()) != values.size()) {
    throw ValidationError("series and period labels must align with shift values");
  }
  const auto order = detail::ordered_periods(periods);
  std::map<std::string, int> rank;
  for (std::size_t t = 0; t < order.size(); ++t) rank[order[t]] = static_cast<int>(t);
  std::map<std::pair<std::string, int>, double> cell;
  for (Index k = 0; k < values.size(); ++k) {
    const auto key = std::make_pair(series[static_cast<std::size_t>(k)], rank[periods[static_cast<std::size_t>(k)]]);
    if (!cell.emplace(key, values[k]).second) {
      throw ValidationError("duplicate observation for series '" + key.first + "' in period '" + periods[static_cast<std::size_t>(k)] + "'");
    }
  }
  std::vector<double> now, before;
  for (const auto& [key, v] : cell) {
    auto it = cell.find({key.first, key.second - lag});
    if (it != cell.end()) {
      now.push_back(v);
      before.push_back(it->second);
    }
  }
  return correlation_test(now, before, lag);
}

inline AutocorrelationResult autocorrelation(const ShiftTable& panel, int lag) {
  if (!panel.period) throw SchemaError("autocorrelation needs a 'period' column on the shift table");
  return autocorrelation(panel.values, panel.series ? *panel.series : panel.ids, *panel.period, lag);
}

// ---------------------------------------------------------------------------

struct IccResult {
  double icc = kNaN;
  bool clamped = false;
  double se = kNaN;  // bootstrap CI length / 3.92
  double ci_lower = kNaN;
  double ci_upper = kNaN;
  double msb = kNaN;
  double msw = kNaN;
  double mean_group_size = kNaN;
  Index groups = 0;
  std::int64_t draws = 0;
  std::int64_t failed_draws = 0;
  Labels warnings;
};

namespace detail {

struct Anova {
  double icc = kNaN, msb = kNaN, msw = kNaN, kbar = kNaN;
  bool clamped = false;
};

inline Anova anova_icc(const std::vector<std::vector<double>>& groups) {
  Anova a;
  const double g = static_cast<double>(groups.size());
  double n = 0.0;
  CompensatedSum grand;
  for (const auto& grp : groups) {
    n += static_cast<double>(grp.size());
    for (double v : grp) grand += v;
  }
  const double mean = grand.value() / n;
  CompensatedSum ssb, ssw;
  for (const auto& grp : groups) {
    CompensatedSum s;
    for (double v : grp) s += v;
    const double gm = s.value() / static_cast<double>(grp.size());
    ssb += static_cast<double>(grp.size()) * (gm - mean) * (gm - mean);
    for (double v : grp) ssw += (v - gm) * (v - gm);
  }
  if (!(g >= 2.0) || !(n > g)) return a;
  a.kbar = n / g;
  a.msb = ssb.value() / (g - 1.0);
  a.msw = ssw.value() / (n - g);
  const double den = a.msb + (a.kbar - 1.0) * a.msw;
  if (!(den > 0.0)) return a;
  a.icc = (a.msb - a.msw) / den;
  const double lower = -1.0 / (a.kbar - 1.0);
  if (a.kbar > 1.0 && a.icc <= lower) {
    a.icc = lower;
    a.clamped = true;
  }
  a.icc = std::min(a.icc, 1.0);
  return a;
}

// Type-7 sample quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

/// One-way ANOVA ICC(1) with a nonparametric bootstrap over groups.
inline IccResult icc(const Vector& values, const Labels& grouping, std::int64_t draws = 1000, std::uint64_t seed = 20240101) {
  if (static_cast<Index>(grouping.size()) != values.size()) throw ValidationError("grouping labels must align with values");
  if (!values.allFinite()) throw ValidationError("ICC values contain non-finite entries");
  std::map<std::string, std::size_t> lookup;
  std::vector<std::vector<double>> groups;
  for (Index k = 0; k < values.size(); ++k) {
    auto [it, inserted] = lookup.emplace(grouping[static_cast<std::size_t>(k)], groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(values[k]);
  }
  const auto multi = std::count_if(groups.begin(), groups.end(), [](const auto& g) { return g.size() >= 2; });
  if (groups.size() < 2 || multi < 1) {
    throw ValidationError("ICC needs at least 2 groups and within-group replication (found " + std::to_string(groups.size()) +
                          " groups)");
  }
  const auto a = detail::anova_icc(groups);
  if (std::isnan(a.icc)) throw NumericalError("ICC undefined: values have no variation");
  IccResult r;
  r.icc = a.icc;
  r.clamped = a.clamped;
  r.msb = a.msb;
  r.msw = a.msw;
  r.mean_group_size = a.kbar;
  r.groups = static_cast<Index>(groups.size());
  if (a.clamped) r.warnings.push_back("ICC at or below -1/(k-1); clamped to the lower bound");
  r.draws = draws;
  if (draws <= 0) return r;

  std::vector<double> boot(static_cast<std::size_t>(draws), kNaN);
  const auto g = static_cast<std::uint64_t>(groups.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t b = 0; b < draws; ++b) {
    RandomStream rng(seed, static_cast<std::uint64_t>(b), 0x49434342ULL);
    std::vector<std::vector<double>> sample;
    sample.reserve(groups.size());
    for (std::uint64_t k = 0; k < g; ++k) sample.push_back(groups[rng.below(g)]);
    boot[static_cast<std::size_t>(b)] = detail::anova_icc(sample).icc;
  }
  std::vector<double> ok;
  for (double v : boot) {
    if (std::isfinite(v)) ok.push_back(v);
  }
  r.failed_draws = draws - static_cast<std::int64_t>(ok.size());
  if (r.failed_draws > 0) r.warnings.push_back(std::to_string(r.failed_draws) + " bootstrap draws had an undefined ICC and were skipped");
  if (ok.size() < 2) {
    r.warnings.push_back("too few valid bootstrap draws for a standard error");
    return r;
  }
  std::sort(ok.begin(), ok.end());
  r.ci_lower = detail::quantile_sorted(ok, 0.025);
  r.ci_upper = detail::quantile_sorted(ok, 0.975);
  r.se = (r.ci_upper - r.ci_lower) / 3.92;
  return r;
}

// ---------------------------------------------------------------------------

struct ConcentrationReport {
  double max_share_ratio = kNaN;
  double max_share_sq_ratio = kNaN;
  double inverse_hhi = kNaN;
  bool cluster_level = false;
  Index groups = 0;
};

/// Concentration of shift weights, or of cluster aggregates w_c = Σ_{j∈c} w_j.
inline ConcentrationReport concentration(const Vector& shift_weights, const std::optional<Labels>& clusters = std::nullopt) {
  if (shift_weights.size() == 0) throw ValidationError("concentration needs at least one shift");
  if ((shift_weights.array() < 0.0).any() || !shift_weights.allFinite()) throw ValidationError("shift weights must be finite and non-negative");
  Vector w = shift_weights;
  ConcentrationReport r;
  if (clusters) {
    if (static_cast<Index>(clusters->size()) != shift_weights.size()) throw ValidationError("cluster labels have the wrong length");
    Index count = 0;
    const auto codes = detail::cluster_codes(*clusters, &count);
    std::vector<CompensatedSum> sums(static_cast<std::size_t>(count));
    for (std::size_t j = 0; j < codes.size(); ++j) sums[static_cast<std::size_t>(codes[j])] += shift_weights[static_cast<Index>(j)];
    w = Vector(count);
    for (Index c = 0; c < count; ++c) w[c] = sums[static_cast<std::size_t>(c)].value();
    r.cluster_level = true;
  }
  r.groups = w.size();
  const double total = compensated_sum(w);
  if (!(total > 0.0)) throw ValidationError("all shift weights are zero");
  const double sq = weighted_dot(Vector::Ones(w.size()), w, w);
  const double max_w = w.maxCoeff();
  r.max_share_ratio = max_w / total;
  r.max_share_sq_ratio = max_w * max_w / sq;
  r.inverse_hhi = total * total / sq;
  return r;
}

inline ConcentrationReport concentration(const ShareMatrix& shares, const Vector& unit_weights,
                                         const std::optional<Labels>& clusters = std::nullopt) {
  return concentration(shares.shift_weights(unit_weights), clusters);
}

// ---------------------------------------------------------------------------

struct ShiftSummary {
  double weighted_mean = kNaN;
  double weighted_sd = kNaN;
  double residual_mean = kNaN;
  double residual_sd = kNaN;
  double sse_ratio = kNaN;
  Index shifts = 0;
  std::vector<AutocorrelationResult> autocorrelations;
  std::map<std::string, IccResult> icc;
  ConcentrationReport concentration;
  Labels warnings;
};

struct ShiftSummaryOptions {
  std::optional<ResidualizationSpec> spec;  // residualize before ICC and residual moments
  std::vector<int> lags;
  Labels icc_groupings;  // shift-table column names
  std::int64_t bootstrap_draws = 1000;
  std::uint64_t seed = 20240101;
  std::optional<std::string> cluster_column;  // concentration at cluster level
};

/// Weighted moments of raw and residualized shifts plus the autocorrelation,
/// ICC and concentration diagnostics in one report.
inline ShiftSummary shift_summary(const ShiftTable& shifts, const Vector& shift_weights, const ShiftSummaryOptions& opts = {}) {
  shifts.validate();
  if (shift_weights.size() != shifts.size()) throw ValidationError("shift weights and shifts are misaligned");
  ShiftSummary s;
  s.shifts = shifts.size();
  s.weighted_mean = weighted_mean(shifts.values, shift_weights);
  s.weighted_sd = weighted_sd(shifts.values, shift_weights);
  Vector eta = shifts.values;
  if (opts.spec) {
    const auto resid = residualize_shifts(shifts, *opts.spec, shift_weights);
    eta = resid.eta_hat;
    s.sse_ratio = resid.sse_ratio;
  } else {
    s.sse_ratio = 1.0;
  }
  s.residual_mean = weighted_mean(eta, shift_weights);
  s.residual_sd = weighted_sd(eta, shift_weights);
  for (int lag : opts.lags) s.autocorrelations.push_back(autocorrelation(shifts, lag));
  for (const auto& g : opts.icc_groupings) s.icc[g] = icc(eta, shifts.labels(g), opts.bootstrap_draws, opts.seed);
  std::optional<Labels> clusters;
  if (opts.cluster_column) clusters = shifts.labels(*opts.cluster_column);
  s.concentration = concentration(shift_weights, clusters);
  detail::add_dominance_warnings(shift_weights, s.warnings, "shift");
  return s;
}

}  // namespace shiftshare
