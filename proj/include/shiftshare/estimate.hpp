#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "shiftshare/construct.hpp"
#include "shiftshare/data.hpp"
#include "shiftshare/numeric.hpp"

namespace shiftshare {

/// Unit-level control design, intercept included when requested.
struct Controls {
  Matrix values;
  Labels names;

  Index cols() const { return values.cols(); }

  void append(const Vector& column, const std::string& name) {
    values.conservativeResize(column.size(), values.cols() + 1);
    values.col(values.cols() - 1) = column;
    names.push_back(name);
  }
  void append(const Matrix& columns, const Labels& column_names) {
    for (Index k = 0; k < columns.cols(); ++k) append(Vector(columns.col(k)), column_names[static_cast<std::size_t>(k)]);
  }
};

inline Controls unit_controls(const Dataset& data, bool intercept = true) {
  Controls c;
  c.values = Matrix(data.size(), 0);
  if (intercept) c.append(Vector::Ones(data.size()), "(intercept)");
  c.append(data.controls, data.control_names);
  return c;
}

inline constexpr const char* kSeConventional = "conventional_cluster";
inline constexpr const char* kSeExposureHc = "hc_exposure_robust";
inline constexpr const char* kSeExposureCluster = "cluster_exposure_robust";
inline constexpr const char* kSeResidualized = "residualized";
inline constexpr const char* kSeResidualizedCluster = "residualized_cluster";

struct EstimateReport {
  std::string estimator;
  std::string framework;
  double beta_hat = kNaN;
  Vector gamma_hat;
  Labels control_names;
  std::map<std::string, double> se;
  double conventional_f = kNaN;
  double effective_f = kNaN;
  Index n_units = 0;
  Index m_shifts = 0;
  Index n_unit_clusters = 0;
  Index n_shift_clusters = 0;
  Vector residuals;
  Vector x_perp;
  Labels warnings;

  double t_stat(const std::string& variant) const { return beta_hat / se.at(variant); }
};

namespace detail {

struct IvFit {
  double beta = kNaN;
  double denominator = 0.0;  // Σ e z⊥ x⊥
  Vector gamma;
  Vector y_perp, x_perp, z_perp;
  Vector residuals;  // y⊥ - β x⊥
};

// Just-identified weighted IV of y on x with exogenous controls; OLS when z = x.
inline IvFit fit_iv(const Vector& y, const Vector& x, const Vector& z, const WeightedProjector& controls, const Vector& e) {
  IvFit f;
  f.y_perp = controls.residualize(y);
  f.x_perp = controls.residualize(x);
  f.z_perp = controls.residualize(z);
  f.denominator = weighted_dot(e, f.z_perp, f.x_perp);
  const double zz = weighted_dot(e, f.z_perp, f.z_perp);
  const double xx = weighted_dot(e, f.x_perp, f.x_perp);
  if (!(zz > 0.0) || !(xx > 0.0) || std::abs(f.denominator) <= 1e-12 * std::sqrt(zz * xx)) {
    throw NumericalError("weak or zero first stage: instrument is uncorrelated with the regressor after controls");
  }
  f.beta = weighted_dot(e, f.z_perp, f.y_perp) / f.denominator;
  f.residuals = f.y_perp - f.beta * f.x_perp;
  f.gamma = controls.coefficients(y - f.beta * x);
  return f;
}

inline std::vector<Index> cluster_codes(const Labels& labels, Index* count) {
  std::map<std::string, Index> lookup;
  std::vector<Index> codes;
  codes.reserve(labels.size());
  for (const auto& l : labels) codes.push_back(lookup.emplace(l, static_cast<Index>(lookup.size())).first->second);
  *count = static_cast<Index>(lookup.size());
  return codes;
}

// Σ_g (Σ_{i∈g} s_i)^2 with singleton groups when no labels are given.
inline double clustered_square_sum(const Vector& scores, const std::optional<Labels>& clusters, Index* groups) {
  if (!clusters) {
    *groups = scores.size();
    return weighted_dot(Vector::Ones(scores.size()), scores, scores);
  }
  if (static_cast<Index>(clusters->size()) != scores.size()) throw ValidationError("cluster labels have the wrong length");
  const auto codes = cluster_codes(*clusters, groups);
  std::vector<CompensatedSum> sums(static_cast<std::size_t>(*groups));
  for (Index i = 0; i < scores.size(); ++i) sums[static_cast<std::size_t>(codes[static_cast<std::size_t>(i)])] += scores[i];
  CompensatedSum total;
  for (const auto& s : sums) total += s.value() * s.value();
  return total.value();
}

// Conventional cluster-robust SE with the G/(G-1)(n-1)/(n-k) factor.
inline double conventional_se(const Vector& e, const Vector& z_perp, const Vector& resid, double denominator,
                              const std::optional<Labels>& clusters, Index params, Index* groups) {
  const Index n = e.size();
  const Vector scores = e.cwiseProduct(z_perp).cwiseProduct(resid);
  const double meat = clustered_square_sum(scores, clusters, groups);
  if (*groups < 2) throw ValidationError("clustered standard errors need at least 2 clusters");
  if (n <= params) throw NumericalError("not enough units for the number of parameters");
  const double g = static_cast<double>(*groups);
  const double factor = g / (g - 1.0) * (static_cast<double>(n) - 1.0) / static_cast<double>(n - params);
  return std::sqrt(factor * meat) / std::abs(denominator);
}

// First-stage F as the squared robust t-statistic of the instrument.
inline double conventional_first_stage_f(const Vector& e, const IvFit& fit, const std::optional<Labels>& clusters, Index params) {
  const double zz = weighted_dot(e, fit.z_perp, fit.z_perp);
  const double pi = fit.denominator / zz;
  const Vector u = fit.x_perp - pi * fit.z_perp;
  Index groups = 0;
  const double se = conventional_se(e, fit.z_perp, u, zz, clusters, params, &groups);
  return se > 0.0 ? (pi / se) * (pi / se) : std::numeric_limits<double>::infinity();
}

inline void add_dominance_warnings(const Vector& w, Labels& warnings, const std::string& what) {
  if (w.size() == 0) return;
  const double total = compensated_sum(w);
  const double sq = weighted_dot(Vector::Ones(w.size()), w, w);
  const double max_w = w.maxCoeff();
  if (total > 0.0 && max_w / total > 0.10) {
    warnings.push_back("largest " + what + " weight is " + format_double(max_w / total) +
                       " of the total (> 0.10); exposure-robust inference assumes no single shift dominates");
  }
  if (sq > 0.0 && max_w * max_w / sq > 0.25) {
    warnings.push_back("largest squared " + what + " weight is " + format_double(max_w * max_w / sq) +
                       " of the sum of squares (> 0.25); exposure-robust inference assumes no single shift dominates");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Unit-level estimators

inline EstimateReport unit_level_report(const Dataset& data, const Vector& x, const Vector& z, const Controls& controls,
                                        const std::optional<Labels>& unit_clusters, const std::string& estimator) {
  data.validate();
  const Index n = data.size();
  if (x.size() != n || z.size() != n) throw ValidationError("regressor or instrument length differs from unit count");
  if (!x.allFinite() || !z.allFinite()) throw ValidationError("regressor or instrument contains non-finite values");
  if (controls.values.rows() != n) throw ValidationError("control matrix has the wrong number of rows");
  const Vector& e = data.unit_weights;

  // Rank check on the full design so collinearity with X is named.
  {
    Matrix full(n, controls.cols() + 1);
    full << x, controls.values;
    Labels names{"x"};
    names.insert(names.end(), controls.names.begin(), controls.names.end());
    WeightedProjector check(full, e, names);
  }
  const WeightedProjector projector(controls.values, e, controls.names);
  const auto fit = detail::fit_iv(data.outcome, x, z, projector, e);

  EstimateReport r;
  r.estimator = estimator;
  r.beta_hat = fit.beta;
  r.gamma_hat = fit.gamma;
  r.control_names = controls.names;
  r.n_units = n;
  r.residuals = fit.residuals;
  r.x_perp = fit.x_perp;
  const Index params = controls.cols() + 1;
  Index groups = 0;
  r.se[kSeConventional] = detail::conventional_se(e, fit.z_perp, fit.residuals, fit.denominator, unit_clusters, params, &groups);
  r.n_unit_clusters = groups;
  r.conventional_f = detail::conventional_first_stage_f(e, fit, unit_clusters, params);
  return r;
}

/// Weighted OLS of Y on X and controls. Runs through the IV core with Z = X,
/// so self-instrumented 2SLS reproduces it bit for bit.
inline EstimateReport shiftshare_ols(const Dataset& data, const Vector& exposure, const Controls& controls,
                                     const std::optional<Labels>& unit_clusters = std::nullopt) {
  return unit_level_report(data, exposure, exposure, controls, unit_clusters, "ols");
}

inline EstimateReport shiftshare_2sls(const Dataset& data, const Vector& instrument, const Controls& controls,
                                      const std::optional<Labels>& unit_clusters = std::nullopt) {
  if (!data.regressor) throw SchemaError("2SLS needs an endogenous regressor column 'x'");
  return unit_level_report(data, *data.regressor, instrument, controls, unit_clusters, "2sls");
}

// ---------------------------------------------------------------------------
// Share exogeneity: Rotemberg weights and GMM

struct RotembergTable {
  Labels shift_ids;
  Vector alpha;
  Vector beta_j;  // NaN where undefined
  std::vector<bool> defined;
  double beta_hat = kNaN;
  double negative_weight_share = 0.0;
  std::vector<Index> ranking;  // by |alpha| descending
  double gmm_beta = kNaN;      // shift-weighted GMM over share moments

  double recombined() const {
    CompensatedSum s;
    for (Index j = 0; j < alpha.size(); ++j) {
      if (defined[static_cast<std::size_t>(j)]) s += alpha[j] * beta_j[j];
    }
    return s.value();
  }
};

namespace detail {

struct ShareMoments {
  Vector a;  // Σ_i e_i w_ij y⊥_i
  Vector b;  // Σ_i e_i w_ij x⊥_i
  Vector share_norm;  // sqrt(Σ_i e_i (w⊥_ij)^2)
  double x_norm = 0.0;
};

inline ShareMoments share_moments(const Dataset& data, const ShareMatrix& shares, const Controls& controls, bool norms) {
  if (!data.regressor) throw SchemaError("share moments need an endogenous regressor column 'x'");
  if (shares.rows() != data.size()) throw ValidationError("share rows and units differ");
  const Vector& e = data.unit_weights;
  const WeightedProjector projector(controls.values, e, controls.names);
  const Vector y_perp = projector.residualize(data.outcome);
  const Vector x_perp = projector.residualize(*data.regressor);
  ShareMoments m;
  m.a = shares.apply_transpose(e.cwiseProduct(y_perp));
  m.b = shares.apply_transpose(e.cwiseProduct(x_perp));
  m.x_norm = std::sqrt(weighted_dot(e, x_perp, x_perp));
  if (norms) {
    const Matrix w_perp = projector.residualize(shares.dense());
    m.share_norm = Vector(shares.cols());
    for (Index j = 0; j < shares.cols(); ++j) {
      const Vector col = w_perp.col(j);
      m.share_norm[j] = std::sqrt(weighted_dot(e, col, col));
    }
  }
  return m;
}

}  // namespace detail

/// GMM over the m share moments Σ_i e_i w_ij (Y_i - β X_i) with controls
/// partialled out, under a given m x m weight matrix.
inline double gmm_share_moments(const Dataset& data, const ShareMatrix& shares, const Controls& controls,
                                const Matrix& weight_matrix) {
  if (weight_matrix.rows() != shares.cols() || weight_matrix.cols() != shares.cols()) {
    throw ValidationError("GMM weight matrix must be m x m");
  }
  const auto m = detail::share_moments(data, shares, controls, false);
  const double den = m.b.dot(weight_matrix * m.b);
  if (!(std::abs(den) > 0.0)) throw NumericalError("GMM objective is flat in beta");
  return m.b.dot(weight_matrix * m.a) / den;
}

/// Rotemberg decomposition of the shift-share 2SLS estimate built from the
/// shift values in `shifts`: α_j ∝ D_j Σ_i e_i w_ij X⊥_i, β_j the estimate
/// instrumented by share j alone.
inline RotembergTable rotemberg(const Dataset& data, const ShareMatrix& shares, const Vector& shifts, const Controls& controls) {
  if (shifts.size() != shares.cols()) throw ValidationError("shift values and share columns differ");
  const auto mom = detail::share_moments(data, shares, controls, true);
  const Index m = shares.cols();
  RotembergTable t;
  t.shift_ids = shares.col_ids();
  t.alpha = Vector(m);
  t.beta_j = Vector::Constant(m, kNaN);
  t.defined.assign(static_cast<std::size_t>(m), false);
  CompensatedSum den, num;
  for (Index j = 0; j < m; ++j) {
    den += shifts[j] * mom.b[j];
    num += shifts[j] * mom.a[j];
  }
  const double total = den.value();
  if (!(std::abs(total) > 0.0)) throw NumericalError("shift-share first stage is zero; Rotemberg weights undefined");
  t.beta_hat = num.value() / total;
  CompensatedSum abs_sum, neg_sum;
  for (Index j = 0; j < m; ++j) {
    t.alpha[j] = shifts[j] * mom.b[j] / total;
    const double scale = mom.share_norm[j] * mom.x_norm;
    if (scale > 0.0 && std::abs(mom.b[j]) > 1e-12 * scale) {
      t.beta_j[j] = mom.a[j] / mom.b[j];
      t.defined[static_cast<std::size_t>(j)] = true;
    }
    abs_sum += std::abs(t.alpha[j]);
    if (t.alpha[j] < 0.0) neg_sum += -t.alpha[j];
  }
  if (std::none_of(t.defined.begin(), t.defined.end(), [](bool d) { return d; })) {
    throw NumericalError("no share has a nonzero first stage; every per-share estimate is undefined");
  }
  t.negative_weight_share = abs_sum.value() > 0.0 ? neg_sum.value() / abs_sum.value() : 0.0;
  t.ranking.resize(static_cast<std::size_t>(m));
  std::iota(t.ranking.begin(), t.ranking.end(), Index{0});
  std::stable_sort(t.ranking.begin(), t.ranking.end(),
                   [&](Index a, Index b) { return std::abs(t.alpha[a]) > std::abs(t.alpha[b]); });
  t.gmm_beta = gmm_share_moments(data, shares, controls, shifts * shifts.transpose());
  return t;
}

// ---------------------------------------------------------------------------
// Shift exogeneity: inverted regression

struct InvertedDataset {
  Labels shift_ids;
  std::vector<Index> shift_index;  // position in the original share columns
  Vector ybar;
  Vector xbar;
  Matrix control_bar;
  Labels control_names;
  Vector weight;
  Vector instrument;
  Labels warnings;

  Index size() const { return ybar.size(); }
};

/// Aggregates unit data to the shift level with weights e_i w_ij / w_j.
/// Y and X are residualized on the unit controls first, so the shift-level
/// IV reproduces the unit-level estimate; control_bar carries the raw
/// aggregated controls. Shifts with w_j = 0 are dropped.
inline InvertedDataset invert(const Dataset& data, const ShareMatrix& shares, const Vector& instrument, const Controls& controls,
                              std::optional<Vector> regressor = std::nullopt) {
  data.validate();
  if (shares.rows() != data.size()) throw ValidationError("share rows and units differ");
  if (instrument.size() != shares.cols()) throw ValidationError("instrument shifts and share columns differ");
  const Vector x = regressor ? *regressor : (data.regressor ? *data.regressor : Vector());
  if (x.size() != data.size()) throw SchemaError("inversion needs a regressor");
  const Vector& e = data.unit_weights;
  const WeightedProjector projector(controls.values, e, controls.names);
  const Vector y_perp = projector.residualize(data.outcome);
  const Vector x_perp = projector.residualize(x);
  const Vector w = shares.shift_weights(e);
  const Vector ysum = shares.apply_transpose(e.cwiseProduct(y_perp));
  const Vector xsum = shares.apply_transpose(e.cwiseProduct(x_perp));
  Matrix csum(shares.cols(), controls.cols());
  for (Index k = 0; k < controls.cols(); ++k) csum.col(k) = shares.apply_transpose(e.cwiseProduct(controls.values.col(k)));

  InvertedDataset inv;
  inv.control_names = controls.names;
  std::vector<Index> keep;
  for (Index j = 0; j < shares.cols(); ++j) {
    if (w[j] > 0.0) keep.push_back(j);
  }
  const auto dropped = static_cast<Index>(shares.cols()) - static_cast<Index>(keep.size());
  if (dropped > 0) inv.warnings.push_back(std::to_string(dropped) + " shift(s) with zero aggregate weight dropped");
  const auto k = static_cast<Index>(keep.size());
  inv.ybar = Vector(k);
  inv.xbar = Vector(k);
  inv.weight = Vector(k);
  inv.instrument = Vector(k);
  inv.control_bar = Matrix(k, controls.cols());
  for (Index r = 0; r < k; ++r) {
    const Index j = keep[static_cast<std::size_t>(r)];
    inv.shift_ids.push_back(shares.col_ids()[static_cast<std::size_t>(j)]);
    inv.shift_index.push_back(j);
    inv.weight[r] = w[j];
    inv.ybar[r] = ysum[j] / w[j];
    inv.xbar[r] = xsum[j] / w[j];
    inv.control_bar.row(r) = csum.row(j) / w[j];
    inv.instrument[r] = instrument[j];
  }
  return inv;
}

/// w_j-weighted shift-level IV of ybar on xbar instrumented by the shift,
/// with shift-level controls q (intercept only when empty).
inline EstimateReport estimate_inverted(const InvertedDataset& inv, const Matrix& shift_controls = Matrix(),
                                        const std::optional<Labels>& shift_clusters = std::nullopt,
                                        const Labels& control_names = {}) {
  const Index m = inv.size();
  if (m < 2) throw ValidationError("inverted regression needs at least 2 shifts with positive weight");
  Matrix q = shift_controls.size() == 0 ? Matrix(Matrix::Ones(m, 1)) : shift_controls;
  Labels names = control_names;
  if (shift_controls.size() == 0) names = {"(intercept)"};
  if (q.rows() != m) throw ValidationError("shift controls have the wrong number of rows");
  const WeightedProjector projector(q, inv.weight, names);
  const Vector d_perp = projector.residualize(inv.instrument);
  const double dd = weighted_dot(inv.weight, d_perp, d_perp);
  const double xx = weighted_dot(inv.weight, inv.xbar, inv.xbar);
  const double den = weighted_dot(inv.weight, d_perp, inv.xbar);
  if (!(dd > 0.0) || !(xx > 0.0) || std::abs(den) <= 1e-12 * std::sqrt(dd * xx)) {
    throw NumericalError("weak or zero first stage in the inverted regression");
  }
  EstimateReport r;
  r.estimator = "inverted";
  r.framework = "shift";
  r.beta_hat = weighted_dot(inv.weight, d_perp, inv.ybar) / den;
  r.gamma_hat = projector.coefficients(inv.ybar - r.beta_hat * inv.xbar);
  r.control_names = names;
  r.m_shifts = m;
  r.residuals = inv.ybar - r.beta_hat * inv.xbar - q * r.gamma_hat;
  r.x_perp = inv.xbar;
  r.warnings = inv.warnings;
  const Vector scores = inv.weight.cwiseProduct(d_perp).cwiseProduct(r.residuals);
  Index groups = 0;
  r.se[kSeExposureHc] = std::sqrt(detail::clustered_square_sum(scores, std::nullopt, &groups)) / std::abs(den);
  if (shift_clusters) {
    if (static_cast<Index>(shift_clusters->size()) != m) throw ValidationError("shift cluster labels have the wrong length");
    r.se[kSeExposureCluster] = std::sqrt(detail::clustered_square_sum(scores, shift_clusters, &groups)) / std::abs(den);
    if (groups < 2) throw ValidationError("clustered standard errors need at least 2 shift clusters");
    r.n_shift_clusters = groups;
  }
  detail::add_dominance_warnings(inv.weight, r.warnings, "shift");
  return r;
}

// ---------------------------------------------------------------------------
// Residualized-shift standard errors and effective F

namespace detail {

inline double residualized_denominator(const Vector& e, const ShareMatrix& shares, const Vector& eta, const Vector& x_perp) {
  const Vector z = shares.apply(eta);
  const double den = std::abs(weighted_dot(e, x_perp, z));
  if (!(den > 0.0)) throw NumericalError("degenerate first stage: Σ e X⊥ Z is zero");
  return den;
}

}  // namespace detail

/// sqrt(Σ_j (Σ_i e_i w_ij ε̂_i)^2 η̂_j^2) / |Σ_i e_i X⊥_i Z_i| with Z = Σ_j w_ij η̂_j.
inline double residualized_se(const Vector& unit_weights, const ShareMatrix& shares, const Vector& eta, const Vector& residuals,
                              const Vector& x_perp) {
  if (eta.size() != shares.cols() || residuals.size() != shares.rows() || x_perp.size() != shares.rows() ||
      unit_weights.size() != shares.rows()) {
    throw ValidationError("residualized SE inputs are misaligned");
  }
  const Vector agg = shares.apply_transpose(unit_weights.cwiseProduct(residuals));
  const Vector terms = agg.cwiseProduct(eta);
  return std::sqrt(weighted_dot(Vector::Ones(terms.size()), terms, terms)) /
         detail::residualized_denominator(unit_weights, shares, eta, x_perp);
}

/// Cluster version: sqrt(Σ_c (Σ_{j∈c} η̂_j Σ_i e_i w_ij ε̂_i)^2) / |Σ_i e_i X⊥_i Z_i|.
inline double residualized_se_clustered(const Vector& unit_weights, const ShareMatrix& shares, const Vector& eta,
                                        const Vector& residuals, const Vector& x_perp, const Labels& clusters) {
  if (static_cast<Index>(clusters.size()) != shares.cols()) throw ValidationError("shift cluster labels have the wrong length");
  if (eta.size() != shares.cols() || residuals.size() != shares.rows() || x_perp.size() != shares.rows()) {
    throw ValidationError("residualized SE inputs are misaligned");
  }
  const Vector agg = shares.apply_transpose(unit_weights.cwiseProduct(residuals));
  Index groups = 0;
  const double meat = detail::clustered_square_sum(agg.cwiseProduct(eta), clusters, &groups);
  return std::sqrt(meat) / detail::residualized_denominator(unit_weights, shares, eta, x_perp);
}

struct EffectiveF {
  double value = kNaN;
  double alpha = kNaN, beta = kNaN;
  double s_aa = kNaN, s_ab = kNaN, s_bb = kNaN;  // HC0 covariance of (α̂, β̂)
};

/// Effective F from the w_j-weighted first stage xbar⊥_j = α + β η̂_j + v_j
/// with a heteroskedasticity-robust (HC0) covariance:
/// Σ w fitted² / (σ_ββ Σ w η̂² + 2 σ_αβ Σ w η̂ + σ_αα Σ w).
inline EffectiveF effective_f(const Vector& xbar_perp, const Vector& eta, const Vector& weights) {
  const Index m = eta.size();
  if (xbar_perp.size() != m || weights.size() != m) throw ValidationError("effective F inputs are misaligned");
  Matrix q(m, 2);
  q.col(0).setOnes();
  q.col(1) = eta;
  const WeightedProjector projector(q, weights, {"(intercept)", "eta"});
  const Vector coef = projector.coefficients(xbar_perp);
  const Vector fitted = q * coef;
  const Vector v = xbar_perp - fitted;
  const Matrix bread = projector.bread();
  Matrix meat = Matrix::Zero(2, 2);
  for (Index j = 0; j < m; ++j) {
    const double s = weights[j] * v[j];
    meat += (s * s) * q.row(j).transpose() * q.row(j);
  }
  const Matrix cov = bread * meat * bread;
  EffectiveF f;
  f.alpha = coef[0];
  f.beta = coef[1];
  f.s_aa = cov(0, 0);
  f.s_ab = cov(0, 1);
  f.s_bb = cov(1, 1);
  const Vector ones = Vector::Ones(m);
  const double num = weighted_dot(weights, fitted, fitted);
  const double den = f.s_bb * weighted_dot(weights, eta, eta) + 2.0 * f.s_ab * weighted_dot(weights, eta, ones) +
                     f.s_aa * compensated_sum(weights);
  f.value = den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
  return f;
}

// ---------------------------------------------------------------------------
// Shift-level covariates as unit controls

/// Σ_j w_ij p_j for each covariate column, named agg_<name>.
inline Controls demean_via_controls(const ShareMatrix& shares, const Matrix& covariates, const Labels& names) {
  if (covariates.rows() != shares.cols()) throw ValidationError("shift covariates and share columns differ");
  if (static_cast<Index>(names.size()) != covariates.cols()) throw ValidationError("covariate names and columns differ");
  Controls c;
  c.values = Matrix(shares.rows(), 0);
  for (Index k = 0; k < covariates.cols(); ++k) c.append(shares.apply(covariates.col(k)), "agg_" + names[static_cast<std::size_t>(k)]);
  return c;
}

/// Shifts demeaned with the covariate coefficients γ̂ that the unit-level
/// regression of Z = Σ_j w_ij D_j on [base controls, Σ_j w_ij p_j] delivers:
/// η̃_j = D_j - p_j'γ̂. Instrumenting with Σ_j w_ij η̃_j under the base
/// controls reproduces the estimate that controls for Σ_j w_ij p_j.
inline Vector fwl_demeaned_shifts(const Dataset& data, const ShareMatrix& shares, const Vector& shifts, const Matrix& covariates,
                                  const Labels& names, const Controls& base) {
  Controls full = base;
  const auto agg = demean_via_controls(shares, covariates, names);
  full.append(agg.values, agg.names);
  const WeightedProjector projector(full.values, data.unit_weights, full.names);
  const Vector coef = projector.coefficients(shares.apply(shifts));
  const Vector gamma = coef.tail(covariates.cols());
  return shifts - covariates * gamma;
}

// ---------------------------------------------------------------------------
// Framework composites

struct ShareFrameworkOptions {
  std::optional<Labels> unit_clusters;
  bool with_rotemberg = false;
};

struct ShareFrameworkResult {
  EstimateReport report;
  std::optional<RotembergTable> rotemberg;
};

/// Share exogeneity: 2SLS (or OLS without a regressor) with Z = Σ_j w_ij D_j,
/// conventional cluster-robust inference.
inline ShareFrameworkResult analyze_share_framework(const Dataset& data, const ShareMatrix& shares, const ShiftTable& shifts,
                                                    const ShareFrameworkOptions& opts = {}) {
  shifts.validate();
  const Controls controls = unit_controls(data);
  const Vector z = build_exposure(shares, shifts);
  ShareFrameworkResult out;
  out.report = data.regressor ? shiftshare_2sls(data, z, controls, opts.unit_clusters)
                              : shiftshare_ols(data, z, controls, opts.unit_clusters);
  out.report.framework = "share";
  out.report.m_shifts = shares.cols();
  for (Index i : shares.zero_rows()) out.report.warnings.push_back("unit '" + shares.row_ids()[static_cast<std::size_t>(i)] + "' has no shares");
  if (opts.with_rotemberg) {
    Dataset d = data;
    if (!d.regressor) d.regressor = z;
    out.rotemberg = rotemberg(d, shares, shifts.values, controls);
  }
  return out;
}

struct ShiftFrameworkOptions {
  std::optional<ResidualizationSpec> spec;  // default: intercept + every shift covariate
  std::optional<Labels> unit_clusters;
  std::optional<std::string> shift_cluster;  // label column in the shift table
};

struct ShiftFrameworkResult {
  EstimateReport report;
  ShiftResiduals residuals;
  InvertedDataset inverted;
  bool completed = false;
  ShareMatrix shares;  // as used (completed when the input was incomplete)
  ShiftTable shifts;
};

/// Shift exogeneity: residualize the shifts, instrument with Z = Σ_j w_ij η̂_j,
/// and report unit-level conventional, inverted-regression exposure-robust
/// and residualized-shift standard errors plus the effective F.
inline ShiftFrameworkResult analyze_shift_framework(const Dataset& data, const ShareMatrix& input_shares, const ShiftTable& input_shifts,
                                                    const ShiftFrameworkOptions& opts = {}) {
  data.validate();
  input_shifts.validate();
  ShiftFrameworkResult out;
  out.completed = !input_shares.is_complete();
  if (out.completed) {
    auto c = complete_shares(input_shares, input_shifts);
    out.shares = std::move(c.shares);
    out.shifts = std::move(c.shifts);
  } else {
    out.shares = input_shares;
    out.shifts = input_shifts;
  }
  const auto& shares = out.shares;
  const auto& shifts = out.shifts;

  ResidualizationSpec spec;
  if (opts.spec) {
    spec = *opts.spec;
  } else {
    spec.covariates = shifts.covariate_names;
  }
  if (out.completed && std::find(spec.covariates.begin(), spec.covariates.end(), "p_real") == spec.covariates.end()) {
    spec.covariates.push_back("p_real");
  }
  const Vector& e = data.unit_weights;
  const Vector w = shares.shift_weights(e);
  out.residuals = residualize_shifts(shifts, spec, w);
  const Vector& eta = out.residuals.eta_hat;

  Controls controls = unit_controls(data);
  if (out.completed) controls.append(input_shares.row_sums(), "share_sum");
  const Vector x = data.regressor ? *data.regressor : build_exposure(shares, shifts);
  const Vector z = shares.apply(eta);

  auto& r = out.report;
  r = unit_level_report(data, x, z, controls, opts.unit_clusters, data.regressor ? "2sls" : "ols");
  r.framework = "shift";
  r.m_shifts = input_shares.cols();

  std::optional<Labels> clusters;
  if (opts.shift_cluster) clusters = shifts.labels(*opts.shift_cluster);

  r.se[kSeResidualized] = residualized_se(e, shares, eta, r.residuals, r.x_perp);
  if (clusters) r.se[kSeResidualizedCluster] = residualized_se_clustered(e, shares, eta, r.residuals, r.x_perp, *clusters);

  out.inverted = invert(data, shares, eta, controls, x);
  std::optional<Labels> kept_clusters;
  if (clusters) {
    kept_clusters.emplace();
    for (Index j : out.inverted.shift_index) kept_clusters->push_back((*clusters)[static_cast<std::size_t>(j)]);
  }
  const auto inv = estimate_inverted(out.inverted, Matrix(), kept_clusters);
  r.se[kSeExposureHc] = inv.se.at(kSeExposureHc);
  if (kept_clusters) {
    r.se[kSeExposureCluster] = inv.se.at(kSeExposureCluster);
    r.n_shift_clusters = inv.n_shift_clusters;
  }
  if (std::abs(inv.beta_hat - r.beta_hat) > 1e-8 * std::max(1.0, std::abs(r.beta_hat))) {
    r.warnings.push_back("inverted-regression estimate " + detail::format_double(inv.beta_hat) + " differs from the unit-level estimate");
  }
  // Dominance is judged on real shifts only.
  Vector real_w = w;
  if (out.completed) real_w.conservativeResize(w.size() - 1);
  Labels dominance;
  detail::add_dominance_warnings(real_w, dominance, "shift");
  r.warnings.insert(r.warnings.end(), out.inverted.warnings.begin(), out.inverted.warnings.end());
  r.warnings.insert(r.warnings.end(), dominance.begin(), dominance.end());
  r.effective_f = effective_f(out.inverted.xbar, out.inverted.instrument, out.inverted.weight).value;
  for (Index i : input_shares.zero_rows()) {
    r.warnings.push_back("unit '" + input_shares.row_ids()[static_cast<std::size_t>(i)] + "' has no shares");
  }
  return out;
}

}  // namespace shiftshare
