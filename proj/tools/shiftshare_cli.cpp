// shiftshare: construct, estimate, ri, diagnose, simulate.
//
// Exit codes: 0 success, 1 invalid input, 2 numerical failure, 64 usage.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "shiftshare/construct.hpp"
#include "shiftshare/diagnose.hpp"
#include "shiftshare/estimate.hpp"
#include "shiftshare/io.hpp"
#include "shiftshare/manifest.hpp"
#include "shiftshare/report.hpp"
#include "shiftshare/rinfer.hpp"
#include "shiftshare/simulate.hpp"

namespace fs = std::filesystem;
using namespace shiftshare;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitUsage = 64;

struct Globals {
  int threads = 0;
  bool quiet = false;
  std::string format = "csv";
  std::string shares, shifts, units;
  std::string out;
};

struct Run {
  const Globals& g;
  RunManifest manifest;
  Labels warnings;

  void input(const std::string& path) {
    if (!path.empty()) manifest.inputs[path] = sha256_file(path);
  }

  LoadedData load_inputs() {
    if (g.shares.empty() || g.shifts.empty() || g.units.empty()) {
      throw ValidationError("--shares, --shifts and --units are all required");
    }
    input(g.shares);
    input(g.shifts);
    input(g.units);
    auto data = load(InputPaths{g.shares, g.shifts, g.units}, parse_format(g.format));
    warn(data.warnings);
    return data;
  }

  void warn(const Labels& w) { warnings.insert(warnings.end(), w.begin(), w.end()); }

  void guard_inputs(const fs::path& target) const {
    std::error_code ec;
    for (const auto& [path, digest] : manifest.inputs) {
      if (fs::exists(target, ec) && fs::equivalent(target, path, ec)) {
        throw ValidationError("refusing to overwrite input file '" + path + "'");
      }
    }
  }

  /// Writes to `path`, or to stdout when no --out was given.
  void emit(const std::string& text, const std::string& path) {
    if (path.empty()) {
      std::cout << text;
      return;
    }
    guard_inputs(path);
    write_text(path, text);
    manifest.outputs[path] = sha256_hex(text);
  }

  void finish(const json& config) {
    if (!g.quiet) {
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    }
    if (g.out.empty()) return;
    manifest.config = config;
    manifest.config_digest = sha256_hex(config.dump());
    manifest.timestamp = utc_timestamp();
    const std::string path = g.out + ".manifest.json";
    guard_inputs(path);
    write_text(path, manifest.to_json().dump(2) + "\n");
  }
};

std::string sibling(const std::string& out, const std::string& suffix) {
  if (out.empty()) return {};
  fs::path p(out);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

std::string render_table(const Table& t, const std::string& format, const std::set<std::string>& string_columns) {
  if (format == "json") return to_json(t, string_columns).dump(2) + "\n";
  return to_csv(t);
}

std::string render_json(const json& j) { return j.dump(2) + "\n"; }

std::string cell(double v) { return std::isfinite(v) ? detail::format_double(v) : std::string("NA"); }

Labels split_list(const std::string& s) {
  Labels out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    boost::algorithm::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Long-format unit shifts (unit_id, shift_id, value). Pairs not listed
/// take the aggregate shift from the shift table.
Matrix read_unit_shifts(const std::string& path, Format format, const LoadedData& data) {
  const Table t = read_table(path, format);
  const auto u_col = t.require("unit_id");
  const auto s_col = t.require("shift_id");
  const auto v_col = t.require("value");
  std::map<std::string, Index> units, shifts;
  for (std::size_t i = 0; i < data.dataset.unit_ids.size(); ++i) units[data.dataset.unit_ids[i]] = static_cast<Index>(i);
  for (std::size_t j = 0; j < data.shifts.ids.size(); ++j) shifts[data.shifts.ids[j]] = static_cast<Index>(j);
  Matrix m = data.shifts.values.transpose().replicate(data.dataset.size(), 1);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    auto iu = units.find(t.rows[r][u_col]);
    auto is = shifts.find(t.rows[r][s_col]);
    if (iu == units.end() || is == shifts.end()) {
      throw ValidationError(t.source + ": row " + std::to_string(r + 2) + ": unknown unit or shift id");
    }
    const double v = t.number(r, v_col);
    if (!std::isfinite(v)) throw ValidationError(t.source + ": row " + std::to_string(r + 2) + ": value is not finite");
    m(iu->second, is->second) = v;
  }
  return m;
}

// ---------------------------------------------------------------------------

struct ConstructArgs {
  bool decompose = false;
  std::string initial_shares;
  std::string unit_shifts;
  bool complete = false;
  std::optional<double> replace_threshold;
  std::string residualize;
  bool loo = false;
  bool loo_raw = false;
};

void run_construct(Run& run, const ConstructArgs& a) {
  auto data = run.load_inputs();
  const auto format = parse_format(run.g.format);
  ShareMatrix shares = data.shares;
  ShiftTable shifts = data.shifts;

  Table units{"units", {"unit_id"}, {}};
  for (const auto& id : data.dataset.unit_ids) units.rows.push_back({id});
  auto add_unit = [&](const std::string& name, const Vector& v) {
    units.header.push_back(name);
    for (Index i = 0; i < v.size(); ++i) units.rows[static_cast<std::size_t>(i)].push_back(cell(v[i]));
  };
  std::map<std::string, Labels> shift_columns;
  bool shift_table_changed = false;

  if (a.complete) {
    auto c = complete_shares(shares, shifts);
    add_unit("share_sum", c.share_sum);
    shares = std::move(c.shares);
    shifts = std::move(c.shifts);
    shift_table_changed = true;
  }
  if (a.replace_threshold) {
    const Vector w = shares.shift_weights(data.dataset.unit_weights);
    auto r = replace_shifts(shifts, w, *a.replace_threshold);
    shifts = std::move(r.shifts);
    shift_table_changed = true;
    Labels flag(static_cast<std::size_t>(shifts.size()), "0");
    for (Index j : r.replaced) flag[static_cast<std::size_t>(j)] = "1";
    shift_columns["replaced"] = flag;
    if (!r.replaced.empty()) {
      run.warnings.push_back(std::to_string(r.replaced.size()) + " shifts set to zero (" + cell(100.0 * r.replaced_fraction) +
                             "% of shifts)");
    }
  }
  add_unit("exposure", build_exposure(shares, shifts));

  if (!a.residualize.empty()) {
    auto spec = ResidualizationSpec::parse(a.residualize);
    if (a.complete && std::find(spec.covariates.begin(), spec.covariates.end(), "p_real") == spec.covariates.end()) {
      spec.covariates.push_back("p_real");
    }
    const Vector w = shares.shift_weights(data.dataset.unit_weights);
    const auto r = residualize_shifts(shifts, spec, w);
    Labels eta, fitted;
    for (Index j = 0; j < shifts.size(); ++j) {
      eta.push_back(cell(r.eta_hat[j]));
      fitted.push_back(cell(r.fitted[j]));
    }
    shift_columns["eta_hat"] = eta;
    shift_columns["fitted"] = fitted;
    add_unit("instrument_residualized", shares.apply(r.eta_hat));
  }

  std::optional<Matrix> unit_shifts;
  if (a.decompose || a.loo) {
    if (a.unit_shifts.empty()) throw ValidationError("--decompose and --loo need --unit-shifts");
    if (a.complete) throw ValidationError("--decompose and --loo work on the input shares; drop --complete-shares");
    run.input(a.unit_shifts);
    unit_shifts = read_unit_shifts(a.unit_shifts, format, data);
  }
  if (a.decompose) {
    if (a.initial_shares.empty()) throw ValidationError("--decompose needs --initial-shares");
    run.input(a.initial_shares);
    const auto initial = shares_from_table(read_table(a.initial_shares, format), data.dataset.unit_ids, data.shifts.ids, nullptr);
    const auto d = decompose(initial, data.shares, *unit_shifts);
    add_unit("expected", d.expected);
    add_unit("shock", d.shock);
    add_unit("share_change", d.share_change);
    add_unit("interaction", d.interaction);
    add_unit("total", d.total);
    Labels ref;
    for (Index j = 0; j < d.reference.size(); ++j) ref.push_back(cell(d.reference[j]));
    if (!shift_table_changed) shift_columns["reference"] = ref;
  }
  if (a.loo) {
    const auto r = leave_one_out_shifts(*unit_shifts, data.shares, !a.loo_raw);
    add_unit("instrument_loo", r.instrument);
    run.warn(r.warnings);
  }

  run.emit(render_table(units, run.g.format, {"unit_id"}), run.g.out);
  if (shift_table_changed || !shift_columns.empty()) {
    Table t = shifts_table(shifts);
    for (const auto& [name, col] : shift_columns) {
      t.header.push_back(name);
      for (std::size_t j = 0; j < col.size(); ++j) t.rows[j].push_back(col[j]);
    }
    const std::string ext = run.g.format == "json" ? ".shifts.json" : ".shifts.csv";
    std::set<std::string> strings{"shift_id", "cluster", "period", "exchange_group", "series"};
    if (run.g.out.empty()) {
      if (!run.g.quiet) std::cerr << "note: shift-level columns are written only with --out\n";
    } else {
      run.emit(render_table(t, run.g.format, strings), sibling(run.g.out, ext));
    }
  }
  if (a.complete) {
    const std::string ext = run.g.format == "json" ? ".shares.json" : ".shares.csv";
    if (!run.g.out.empty()) run.emit(render_table(shares_table(shares), run.g.format, {"unit_id", "shift_id"}), sibling(run.g.out, ext));
  }
}

// ---------------------------------------------------------------------------

struct EstimateArgs {
  std::string framework = "shift";
  std::string cluster_unit;
  std::string cluster_shift;
  bool rotemberg = false;
  std::string se = "all";
  std::string report = "json";
  std::string residualize;
};

void filter_se(EstimateReport& r, const std::string& which) {
  if (which == "all") return;
  std::set<std::string> keep;
  if (which == "conventional") keep = {kSeConventional};
  if (which == "exposure") keep = {kSeExposureHc, kSeExposureCluster};
  if (which == "residualized") keep = {kSeResidualized, kSeResidualizedCluster};
  for (auto it = r.se.begin(); it != r.se.end();) it = keep.count(it->first) ? std::next(it) : r.se.erase(it);
  if (r.se.empty()) throw ValidationError("no '" + which + "' standard error in the " + r.framework + " framework");
}

void run_estimate(Run& run, const EstimateArgs& a) {
  auto data = run.load_inputs();
  std::optional<Labels> unit_clusters;
  if (!a.cluster_unit.empty()) unit_clusters = data.dataset.label(a.cluster_unit);

  json out;
  out["schema_version"] = kReportSchemaVersion;
  EstimateReport report;
  if (a.framework == "share") {
    if (!a.cluster_shift.empty() || !a.residualize.empty()) {
      throw ValidationError("--cluster-shift and --residualize apply to the shift framework only");
    }
    auto r = analyze_share_framework(data.dataset, data.shares, data.shifts, {unit_clusters, a.rotemberg});
    report = std::move(r.report);
    if (r.rotemberg) out["rotemberg"] = to_json(*r.rotemberg);
  } else {
    if (a.rotemberg) throw ValidationError("--rotemberg applies to the share framework only");
    ShiftFrameworkOptions opts;
    if (!a.residualize.empty()) opts.spec = ResidualizationSpec::parse(a.residualize);
    opts.unit_clusters = unit_clusters;
    if (!a.cluster_shift.empty()) opts.shift_cluster = a.cluster_shift;
    auto r = analyze_shift_framework(data.dataset, data.shares, data.shifts, opts);
    report = std::move(r.report);
    out["residualization"] = {{"spec", r.residuals.spec.to_string()},
                              {"sse_ratio", detail::number(r.residuals.sse_ratio)},
                              {"iterations", r.residuals.iterations}};
    out["shares_completed"] = r.completed;
  }
  filter_se(report, a.se);
  run.warn(report.warnings);
  out["estimate"] = to_json(report);

  if (a.report == "json") run.emit(render_json(out), run.g.out);
  else if (a.report == "csv") run.emit(estimate_csv(report), run.g.out);
  else run.emit(estimate_text(report), run.g.out);
}

// ---------------------------------------------------------------------------

struct RiArgs {
  std::optional<double> beta0;
  double level = 0.95;
  std::int64_t draws = 2000;
  std::uint64_t seed = 20240101;
  std::string groups;
  std::string enumerate = "auto";
  std::optional<double> grid_lower, grid_upper;
  int grid_points = 21;
  bool distribution = false;
};

void run_ri(Run& run, const RiArgs& a) {
  auto data = run.load_inputs();
  RiOptions opts;
  opts.draws = a.draws;
  opts.seed = a.seed;
  opts.level = a.level;
  if (!a.groups.empty()) opts.group_column = a.groups;
  opts.enumeration = a.enumerate == "always" ? Enumeration::always : a.enumerate == "never" ? Enumeration::never : Enumeration::automatic;
  run.manifest.seed = a.seed;
  const Controls controls = unit_controls(data.dataset);

  std::optional<RiGrid> grid;
  if (a.grid_lower || a.grid_upper) {
    if (!a.grid_lower || !a.grid_upper) throw ValidationError("--grid-lower and --grid-upper go together");
    grid = RiGrid{*a.grid_lower, *a.grid_upper, a.grid_points};
  }
  json out;
  out["schema_version"] = kReportSchemaVersion;
  const auto result = ri_estimate(data.dataset, data.shares, data.shifts, controls, opts, grid);
  run.warn(result.warnings);
  out["ri"] = to_json(result, a.distribution);
  if (a.beta0) {
    auto test = ri_test(data.dataset, data.shares, data.shifts, controls, *a.beta0, opts);
    if (!a.distribution) test.distribution.clear();
    out["test"] = to_json(test);
  }
  run.emit(render_json(out), run.g.out);
}

// ---------------------------------------------------------------------------

struct DiagnoseArgs {
  std::string balance;
  std::string shift_balance;
  std::string icc;
  std::vector<int> lags;
  bool concentration = false;
  std::string cluster;
  std::string residualize;
  std::int64_t bootstrap = 1000;
  std::uint64_t seed = 20240101;
  bool tables = false;
};

void run_diagnose(Run& run, const DiagnoseArgs& a) {
  auto data = run.load_inputs();
  run.manifest.seed = a.seed;
  const Vector& e = data.dataset.unit_weights;
  json out;
  out["schema_version"] = kReportSchemaVersion;

  std::optional<ResidualizationSpec> spec;
  if (!a.residualize.empty()) spec = ResidualizationSpec::parse(a.residualize);

  ShiftSummaryOptions so;
  so.spec = spec;
  so.lags = a.lags;
  if (!a.icc.empty()) so.icc_groupings = split_list(a.icc);
  so.bootstrap_draws = a.bootstrap;
  so.seed = a.seed;
  if (!a.cluster.empty()) so.cluster_column = a.cluster;
  const Vector w = data.shares.shift_weights(e);
  const auto summary = shift_summary(data.shifts, w, so);
  run.warn(summary.warnings);
  out["shift_summary"] = to_json(summary);
  if (a.concentration) out["concentration"] = to_json(summary.concentration);

  Table balance_table{"balance", {"level", "variable", "se_variant", "coefficient", "se", "t_stat", "p_value", "n"}, {}};
  auto row = [&](const std::string& level, const std::string& name, const BalanceResult& b) {
    balance_table.rows.push_back({level, name, b.se_variant, cell(b.coefficient), cell(b.se), cell(b.t_stat), cell(b.p_value),
                                  std::to_string(b.n)});
  };

  if (!a.balance.empty()) {
    ShiftFrameworkOptions fo;
    fo.spec = spec;
    if (!a.cluster.empty()) fo.shift_cluster = a.cluster;
    const auto fw = analyze_shift_framework(data.dataset, data.shares, data.shifts, fo);
    Controls controls = unit_controls(data.dataset);
    if (fw.completed) controls.append(data.shares.row_sums(), "share_sum");
    const Vector z = fw.shares.apply(fw.residuals.eta_hat);
    std::optional<Labels> shift_clusters;
    if (!a.cluster.empty()) shift_clusters = fw.shifts.labels(a.cluster);
    json unit = json::object();
    for (const auto& col : split_list(a.balance)) {
      const Vector placebo = data.dataset.numeric(col);
      UnitBalanceOptions conv;
      conv.conventional = true;
      UnitBalanceOptions expo;
      expo.exposure = ExposureInputs{fw.shares, fw.residuals.eta_hat, shift_clusters};
      const auto bc = balance_test_unit(data.dataset, placebo, z, controls, conv);
      const auto be = balance_test_unit(data.dataset, placebo, z, controls, expo);
      unit[col] = {{"conventional", to_json(bc)}, {"exposure_robust", to_json(be)}};
      row("unit", col, bc);
      row("unit", col, be);
      run.warn(bc.warnings);
      run.warn(be.warnings);
    }
    out["balance_unit"] = unit;
  }
  if (!a.shift_balance.empty()) {
    ShiftBalanceOptions bo;
    if (spec) bo.spec = *spec;
    if (!a.cluster.empty()) bo.shift_clusters = data.shifts.labels(a.cluster);
    json shift = json::object();
    for (const auto& col : split_list(a.shift_balance)) {
      const auto b = balance_test_shift(data.shifts.numeric(col), data.shifts, w, bo);
      shift[col] = to_json(b);
      row("shift", col, b);
      run.warn(b.warnings);
    }
    out["balance_shift"] = shift;
  }

  run.emit(render_json(out), run.g.out);
  if (!a.tables) return;
  if (run.g.out.empty()) throw ValidationError("--tables needs --out");
  if (!balance_table.rows.empty()) run.emit(to_csv(balance_table), sibling(run.g.out, ".balance.csv"));
  Table moments{"summary", {"statistic", "value"}, {}};
  moments.rows = {{"shifts", std::to_string(summary.shifts)},
                  {"weighted_mean", cell(summary.weighted_mean)},
                  {"weighted_sd", cell(summary.weighted_sd)},
                  {"residual_mean", cell(summary.residual_mean)},
                  {"residual_sd", cell(summary.residual_sd)},
                  {"inverse_hhi", cell(summary.concentration.inverse_hhi)},
                  {"max_share_ratio", cell(summary.concentration.max_share_ratio)}};
  for (const auto& ac : summary.autocorrelations) {
    moments.rows.push_back({"autocorrelation_lag" + std::to_string(ac.lag), cell(ac.correlation)});
  }
  for (const auto& [g, r] : summary.icc) {
    moments.rows.push_back({"icc_" + g, cell(r.icc)});
    moments.rows.push_back({"icc_" + g + "_se", cell(r.se)});
  }
  run.emit(to_csv(moments), sibling(run.g.out, ".summary.csv"));
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string config;
  std::optional<std::int64_t> reps;
  std::optional<std::uint64_t> seed;
  std::string estimators;
  std::vector<std::string> set;
};

DgpConfig resolve_config(Run& run, const SimulateArgs& a) {
  DgpConfig c;
  if (!a.config.empty()) {
    run.input(a.config);
    c = DgpConfig::load(a.config);
  }
  if (a.reps) c.set("replications", std::to_string(*a.reps));
  if (a.seed) c.set("seed", std::to_string(*a.seed));
  if (!a.estimators.empty()) c.set("estimators", a.estimators);
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
    c.set(boost::algorithm::trim_copy(kv.substr(0, eq)), boost::algorithm::trim_copy(kv.substr(eq + 1)));
  }
  c.validate();
  return c;
}

void run_simulate(Run& run, const DgpConfig& c) {
  run.manifest.seed = c.seed;
  const auto results = run_coverage(c);
  if (run.g.format == "json") {
    json out;
    out["schema_version"] = kReportSchemaVersion;
    out["config"] = c.to_text();
    out["results"] = json::array();
    for (const auto& r : results) out["results"].push_back(to_json(r));
    run.emit(render_json(out), run.g.out);
  } else {
    run.emit(coverage_csv(results), run.g.out);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shift-share instrumental variables toolkit", "shiftshare"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--threads", g.threads, "Worker thread cap (0 = runtime default)")->envname("SHIFTSHARE_THREADS")->check(CLI::NonNegativeNumber);
  app.add_flag("--quiet", g.quiet, "Suppress warnings on stderr");
  app.add_option("--format", g.format, "Input and table output format")->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--shares", g.shares, "Long-format shares (unit_id, shift_id, weight)");
  app.add_option("--shifts", g.shifts, "Shift table (shift_id, value, ...)");
  app.add_option("--units", g.units, "Unit table (unit_id, y, [x], [w_e], ...)");
  app.add_option("--out", g.out, "Output path; a manifest is written to <out>.manifest.json");

  ConstructArgs ca;
  auto* construct = app.add_subcommand("construct", "Build shift-share variables and derived columns");
  construct->add_flag("--decompose", ca.decompose, "Decompose exposure into expected, shock, share-change and interaction parts");
  construct->add_option("--initial-shares", ca.initial_shares, "Initial shares for --decompose");
  construct->add_option("--unit-shifts", ca.unit_shifts, "Long-format unit-specific shifts (unit_id, shift_id, value)");
  construct->add_flag("--complete-shares", ca.complete, "Append the complement share and a zero shift");
  construct->add_option("--replace-threshold", ca.replace_threshold, "Zero shifts whose aggregate share is below this value");
  construct->add_option("--residualize", ca.residualize, "Shift residualization, e.g. \"1 + p_1 + fe(period)\"");
  construct->add_flag("--loo", ca.loo, "Leave-one-out estimated-shift instrument");
  construct->add_flag("--loo-unnormalized", ca.loo_raw, "Leave-one-out without renormalizing the remaining weights");

  EstimateArgs ea;
  auto* estimate = app.add_subcommand("estimate", "Shift-share OLS/2SLS with standard errors");
  estimate->add_option("--framework", ea.framework, "share or shift exogeneity")->check(CLI::IsMember({"share", "shift"}));
  estimate->add_option("--cluster-unit", ea.cluster_unit, "Unit-table column for conventional clustering");
  estimate->add_option("--cluster-shift", ea.cluster_shift, "Shift-table column for exposure-robust clustering");
  estimate->add_flag("--rotemberg", ea.rotemberg, "Add Rotemberg weights (share framework)");
  estimate->add_option("--se", ea.se, "Standard errors to report")->check(CLI::IsMember({"all", "conventional", "exposure", "residualized"}));
  estimate->add_option("--report", ea.report, "Report format")->check(CLI::IsMember({"json", "csv", "text"}));
  estimate->add_option("--residualize", ea.residualize, "Shift residualization (default: intercept + shift covariates)");

  RiArgs ra;
  auto* ri = app.add_subcommand("ri", "Randomization inference over within-group shift permutations");
  ri->add_option("--beta0", ra.beta0, "Also test this null value");
  ri->add_option("--level", ra.level, "Confidence level")->check(CLI::Range(0.5, 0.9999));
  ri->add_option("--draws", ra.draws, "Permutation draws");
  ri->add_option("--seed", ra.seed, "Random seed");
  ri->add_option("--groups", ra.groups, "Shift-table column defining exchangeable groups");
  ri->add_option("--enumerate", ra.enumerate, "Exact enumeration")->check(CLI::IsMember({"auto", "always", "never"}));
  ri->add_option("--grid-lower", ra.grid_lower, "Lower end of the reported beta grid");
  ri->add_option("--grid-upper", ra.grid_upper, "Upper end of the reported beta grid");
  ri->add_option("--grid-points", ra.grid_points, "Grid points")->check(CLI::Range(2, 100000));
  ri->add_flag("--distribution", ra.distribution, "Include permutation distributions in the report");

  DiagnoseArgs da;
  auto* diagnose = app.add_subcommand("diagnose", "Balance, autocorrelation, ICC and concentration diagnostics");
  diagnose->add_option("--balance", da.balance, "Comma-separated unit-level placebo columns");
  diagnose->add_option("--shift-balance", da.shift_balance, "Comma-separated shift-level placebo columns");
  diagnose->add_option("--icc", da.icc, "Comma-separated shift-table grouping columns");
  diagnose->add_option("--autocorr", da.lags, "Autocorrelation lags")->delimiter(',');
  diagnose->add_flag("--concentration", da.concentration, "Report concentration at the top level");
  diagnose->add_option("--cluster", da.cluster, "Shift-table cluster column");
  diagnose->add_option("--residualize", da.residualize, "Shift residualization for ICC and balance");
  diagnose->add_option("--bootstrap", da.bootstrap, "ICC bootstrap draws");
  diagnose->add_option("--seed", da.seed, "Random seed");
  diagnose->add_flag("--tables", da.tables, "Also write <stem>.balance.csv and <stem>.summary.csv");

  SimulateArgs sa;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo coverage study");
  simulate->add_option("--config", sa.config, "key = value config file");
  simulate->add_option("--reps", sa.reps, "Replications");
  simulate->add_option("--seed", sa.seed, "Random seed");
  simulate->add_option("--estimators", sa.estimators, "Comma-separated estimators");
  simulate->add_option("--set", sa.set, "Override a config key (key=value), repeatable");

  for (auto* sub : {construct, estimate, ri, diagnose, simulate}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

#ifdef _OPENMP
  if (g.threads > 0) omp_set_num_threads(g.threads);
#endif

  Run run{g, {}, {}};
  run.manifest.command_line.assign(argv, argv + argc);
  json config = {{"format", g.format}, {"shares", g.shares}, {"shifts", g.shifts}, {"units", g.units}};
  try {
    if (*construct) {
      config["command"] = "construct";
      config["decompose"] = ca.decompose;
      config["initial_shares"] = ca.initial_shares;
      config["unit_shifts"] = ca.unit_shifts;
      config["complete_shares"] = ca.complete;
      config["replace_threshold"] = ca.replace_threshold ? json(*ca.replace_threshold) : json(nullptr);
      config["residualize"] = ca.residualize;
      config["loo"] = ca.loo;
      config["loo_unnormalized"] = ca.loo_raw;
      run_construct(run, ca);
    } else if (*estimate) {
      config["command"] = "estimate";
      config["framework"] = ea.framework;
      config["cluster_unit"] = ea.cluster_unit;
      config["cluster_shift"] = ea.cluster_shift;
      config["rotemberg"] = ea.rotemberg;
      config["se"] = ea.se;
      config["report"] = ea.report;
      config["residualize"] = ea.residualize;
      run_estimate(run, ea);
    } else if (*ri) {
      config["command"] = "ri";
      config["beta0"] = ra.beta0 ? json(*ra.beta0) : json(nullptr);
      config["level"] = ra.level;
      config["draws"] = ra.draws;
      config["seed"] = ra.seed;
      config["groups"] = ra.groups;
      config["enumerate"] = ra.enumerate;
      config["grid"] = {{"lower", ra.grid_lower ? json(*ra.grid_lower) : json(nullptr)},
                        {"upper", ra.grid_upper ? json(*ra.grid_upper) : json(nullptr)},
                        {"points", ra.grid_points}};
      config["distribution"] = ra.distribution;
      run_ri(run, ra);
    } else if (*diagnose) {
      config["command"] = "diagnose";
      config["balance"] = da.balance;
      config["shift_balance"] = da.shift_balance;
      config["icc"] = da.icc;
      config["autocorr"] = da.lags;
      config["concentration"] = da.concentration;
      config["cluster"] = da.cluster;
      config["residualize"] = da.residualize;
      config["bootstrap"] = da.bootstrap;
      config["seed"] = da.seed;
      config["tables"] = da.tables;
      run_diagnose(run, da);
    } else if (*simulate) {
      const auto c = resolve_config(run, sa);
      config["command"] = "simulate";
      config["dgp"] = c.to_text();
      run_simulate(run, c);
    }
    run.finish(config);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return 0;
}
