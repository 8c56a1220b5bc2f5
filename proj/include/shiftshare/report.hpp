#pragma once

// JSON, CSV and text rendering of results. JSON is canonical: keys are
// sorted and non-finite numbers become null, so identical inputs give
// identical bytes.

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shiftshare/construct.hpp"
#include "shiftshare/diagnose.hpp"
#include "shiftshare/estimate.hpp"
#include "shiftshare/rinfer.hpp"
#include "shiftshare/simulate.hpp"

namespace shiftshare {

inline constexpr int kReportSchemaVersion = 1;

namespace detail {

inline nlohmann::json number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json numbers(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Index k = 0; k < v.size(); ++k) out.push_back(number(v[k]));
  return out;
}

inline nlohmann::json numbers(const std::vector<double>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (double x : v) out.push_back(number(x));
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const EstimateReport& r) {
  nlohmann::json j;
  j["estimator"] = r.estimator;
  j["framework"] = r.framework;
  j["beta_hat"] = detail::number(r.beta_hat);
  nlohmann::json gamma = nlohmann::json::object();
  for (Index k = 0; k < r.gamma_hat.size(); ++k) gamma[r.control_names[static_cast<std::size_t>(k)]] = detail::number(r.gamma_hat[k]);
  j["gamma_hat"] = gamma;
  nlohmann::json se = nlohmann::json::object(), t = nlohmann::json::object();
  for (const auto& [k, v] : r.se) {
    se[k] = detail::number(v);
    t[k] = detail::number(r.beta_hat / v);
  }
  j["se"] = se;
  j["t_stat"] = t;
  j["conventional_f"] = detail::number(r.conventional_f);
  j["effective_f"] = detail::number(r.effective_f);
  j["n_units"] = r.n_units;
  j["m_shifts"] = r.m_shifts;
  j["n_unit_clusters"] = r.n_unit_clusters;
  j["n_shift_clusters"] = r.n_shift_clusters;
  j["warnings"] = r.warnings;
  return j;
}

inline nlohmann::json to_json(const RotembergTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index k : t.ranking) {
    const auto j = static_cast<std::size_t>(k);
    rows.push_back({{"shift_id", t.shift_ids[j]},
                    {"alpha", detail::number(t.alpha[k])},
                    {"beta_j", t.defined[j] ? detail::number(t.beta_j[k]) : nlohmann::json(nullptr)},
                    {"defined", static_cast<bool>(t.defined[j])}});
  }
  return {{"beta_hat", detail::number(t.beta_hat)},
          {"gmm_beta", detail::number(t.gmm_beta)},
          {"negative_weight_share", detail::number(t.negative_weight_share)},
          {"alpha_sum", detail::number(t.alpha.sum())},
          {"shifts", rows}};
}

inline nlohmann::json to_json(const RiTest& t) {
  return {{"beta0", detail::number(t.beta0)},       {"statistic", detail::number(t.statistic)},
          {"center", detail::number(t.center)},     {"p_value", detail::number(t.p_value)},
          {"draws", t.draws},                       {"exhaustive", t.exhaustive},
          {"seed", t.seed},                         {"warnings", t.warnings}};
}

inline nlohmann::json to_json(const RiResult& r, bool with_distribution = true) {
  nlohmann::json j;
  j["beta_grid"] = detail::numbers(r.beta_grid);
  j["stat_observed"] = detail::numbers(r.stat_observed);
  j["p_values"] = detail::numbers(r.p_values);
  if (with_distribution) {
    nlohmann::json dist = nlohmann::json::array();
    for (const auto& d : r.stat_distribution) dist.push_back(detail::numbers(d));
    j["stat_distribution"] = dist;
  }
  j["point_estimate"] = detail::number(r.point_estimate);
  j["p_at_point"] = detail::number(r.p_at_point);
  j["ci"] = {{"lower", detail::number(r.ci_lower)}, {"upper", detail::number(r.ci_upper)}, {"level", r.level}};
  j["draws"] = r.draws;
  j["exhaustive"] = r.exhaustive;
  j["seed"] = r.seed;
  j["warnings"] = r.warnings;
  return j;
}

inline nlohmann::json to_json(const BalanceResult& b) {
  return {{"coefficient", detail::number(b.coefficient)}, {"se", detail::number(b.se)},
          {"se_variant", b.se_variant},                   {"t_stat", detail::number(b.t_stat)},
          {"p_value", detail::number(b.p_value)},         {"n", b.n},
          {"degenerate", b.degenerate},                   {"warnings", b.warnings}};
}

inline nlohmann::json to_json(const AutocorrelationResult& a) {
  return {{"lag", a.lag}, {"correlation", detail::number(a.correlation)}, {"p_value", detail::number(a.p_value)}, {"pairs", a.pairs}};
}

inline nlohmann::json to_json(const IccResult& r) {
  return {{"icc", detail::number(r.icc)},
          {"clamped", r.clamped},
          {"se", detail::number(r.se)},
          {"ci_lower", detail::number(r.ci_lower)},
          {"ci_upper", detail::number(r.ci_upper)},
          {"msb", detail::number(r.msb)},
          {"msw", detail::number(r.msw)},
          {"mean_group_size", detail::number(r.mean_group_size)},
          {"groups", r.groups},
          {"draws", r.draws},
          {"failed_draws", r.failed_draws},
          {"warnings", r.warnings}};
}

inline nlohmann::json to_json(const ConcentrationReport& c) {
  return {{"max_share_ratio", detail::number(c.max_share_ratio)},
          {"max_share_sq_ratio", detail::number(c.max_share_sq_ratio)},
          {"inverse_hhi", detail::number(c.inverse_hhi)},
          {"cluster_level", c.cluster_level},
          {"groups", c.groups}};
}

inline nlohmann::json to_json(const ShiftSummary& s) {
  nlohmann::json autocorr = nlohmann::json::array();
  for (const auto& a : s.autocorrelations) autocorr.push_back(to_json(a));
  nlohmann::json icc_json = nlohmann::json::object();
  for (const auto& [k, v] : s.icc) icc_json[k] = to_json(v);
  return {{"weighted_mean", detail::number(s.weighted_mean)},
          {"weighted_sd", detail::number(s.weighted_sd)},
          {"residual_mean", detail::number(s.residual_mean)},
          {"residual_sd", detail::number(s.residual_sd)},
          {"sse_ratio", detail::number(s.sse_ratio)},
          {"shifts", s.shifts},
          {"autocorrelation", autocorr},
          {"icc", icc_json},
          {"concentration", to_json(s.concentration)},
          {"warnings", s.warnings}};
}

inline nlohmann::json to_json(const CoverageResult& c) {
  return {{"estimator", c.estimator},
          {"replications", c.replications},
          {"failures", c.failures},
          {"mean_bias", detail::number(c.mean_bias)},
          {"sd_beta", detail::number(c.sd_beta)},
          {"mean_se", detail::number(c.mean_se)},
          {"coverage", detail::number(c.coverage)},
          {"rejection_rate", detail::number(c.rejection_rate)}};
}

/// One row per SE variant. Lossy: warnings and metadata are dropped.
inline std::string estimate_csv(const EstimateReport& r) {
  std::ostringstream out;
  out << "estimator,framework,beta_hat,se_variant,se,t_stat,conventional_f,effective_f,n_units,m_shifts\n";
  auto num = [](double v) { return std::isfinite(v) ? detail::format_double(v) : std::string("NA"); };
  for (const auto& [k, v] : r.se) {
    out << r.estimator << ',' << r.framework << ',' << num(r.beta_hat) << ',' << k << ',' << num(v) << ',' << num(r.beta_hat / v)
        << ',' << num(r.conventional_f) << ',' << num(r.effective_f) << ',' << r.n_units << ',' << r.m_shifts << '\n';
  }
  return out.str();
}

inline std::string estimate_text(const EstimateReport& r) {
  std::ostringstream out;
  out << std::setprecision(6);
  out << r.estimator << " (" << (r.framework.empty() ? "unit" : r.framework) << " framework)\n";
  out << "  beta_hat        " << r.beta_hat << "\n";
  for (const auto& [k, v] : r.se) out << "  se " << std::left << std::setw(24) << k << v << "  t = " << r.beta_hat / v << "\n";
  if (std::isfinite(r.conventional_f)) out << "  first-stage F   " << r.conventional_f << "\n";
  if (std::isfinite(r.effective_f)) out << "  effective F     " << r.effective_f << "\n";
  out << "  units " << r.n_units << ", shifts " << r.m_shifts << "\n";
  for (const auto& w : r.warnings) out << "  warning: " << w << "\n";
  return out.str();
}

}  // namespace shiftshare
