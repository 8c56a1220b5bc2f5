#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "shiftshare/data.hpp"
#include "shiftshare/numeric.hpp"

namespace shiftshare {

// ---------------------------------------------------------------------------
// Exposure and decomposition

/// X_i = Σ_j w_ij D_j.
inline Vector build_exposure(const ShareMatrix& shares, const Vector& shifts) { return shares.apply(shifts); }

inline Vector build_exposure(const ShareMatrix& shares, const ShiftTable& shifts) {
  return build_exposure(shares, shifts.values);
}

/// Additive decomposition of X_it = Σ_j w_ijt D_ijt around initial shares
/// w_ij0 and reference shifts D̄_jt. The interaction term
/// Σ_j (w_ijt - w_ij0)(D_ijt - D̄_jt) closes the identity whenever both
/// shares and unit shifts move; it vanishes if either is held fixed.
struct DecompositionResult {
  Vector expected;      // Σ_j w_ij0 D̄_jt
  Vector shock;         // Σ_j w_ij0 (D_ijt - D̄_jt)
  Vector share_change;  // Σ_j (w_ijt - w_ij0) D̄_jt
  Vector interaction;   // Σ_j (w_ijt - w_ij0)(D_ijt - D̄_jt)
  Vector total;         // Σ_j w_ijt D_ijt
  Vector reference;     // D̄_jt actually used
};

/// Reference shifts default to the current-share-weighted mean of the unit
/// shifts in each column (plain mean when a column carries no weight).
inline DecompositionResult decompose(const ShareMatrix& initial, const ShareMatrix& current, const Matrix& unit_shifts,
                                     std::optional<Vector> reference = std::nullopt) {
  const Index n = current.rows();
  const Index m = current.cols();
  if (initial.rows() != n || initial.cols() != m) throw ValidationError("initial and current shares differ in shape");
  if (unit_shifts.rows() != n || unit_shifts.cols() != m) {
    throw ValidationError("unit shift matrix must be " + std::to_string(n) + "x" + std::to_string(m));
  }
  if (!unit_shifts.allFinite()) throw ValidationError("unit shifts contain NaN or infinite values");
  const Matrix w0 = initial.dense();
  const Matrix wt = current.dense();
  Vector ref(m);
  if (reference) {
    if (reference->size() != m) throw ValidationError("reference shifts have the wrong length");
    if (!reference->allFinite()) throw ValidationError("reference shifts contain NaN");
    ref = *reference;
  } else {
    for (Index j = 0; j < m; ++j) {
      const double total = wt.col(j).sum();
      ref[j] = total > 0.0 ? wt.col(j).dot(unit_shifts.col(j)) / total : unit_shifts.col(j).mean();
    }
  }
  DecompositionResult r;
  r.reference = ref;
  r.expected = Vector(n);
  r.shock = Vector(n);
  r.share_change = Vector(n);
  r.interaction = Vector(n);
  r.total = Vector(n);
  for (Index i = 0; i < n; ++i) {
    CompensatedSum e, s, c, x, t;
    for (Index j = 0; j < m; ++j) {
      const double dev = unit_shifts(i, j) - ref[j];
      const double dw = wt(i, j) - w0(i, j);
      e += w0(i, j) * ref[j];
      s += w0(i, j) * dev;
      c += dw * ref[j];
      x += dw * dev;
      t += wt(i, j) * unit_shifts(i, j);
    }
    r.expected[i] = e.value();
    r.shock[i] = s.value();
    r.share_change[i] = c.value();
    r.interaction[i] = x.value();
    r.total[i] = t.value();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Incomplete shares

struct CompletedShares {
  ShareMatrix shares;  // m + 1 columns, rows sum to 1
  ShiftTable shifts;   // appended shift fixed at 0, indicator covariate "p_real"
  Vector share_sum;    // Σ_{j<=m} w_ij, the control the completion calls for
};

inline constexpr const char* kComplementShiftId = "__complement__";

/// Appends w_i(m+1) = 1 - Σ_j w_ij and a zero shift D_{m+1}. Real shifts get
/// p_real = 1 and the appended one p_real = 0; other covariates are 0 there.
inline CompletedShares complete_shares(const ShareMatrix& shares, const ShiftTable& shifts) {
  shifts.validate();
  if (shifts.size() != shares.cols()) throw ValidationError("shift table does not match share columns");
  const Index n = shares.rows();
  const Index m = shares.cols();
  CompletedShares out;
  out.share_sum = shares.row_sums();
  auto entries = shares.entries();
  for (Index i = 0; i < n; ++i) {
    // Rows may overshoot 1 by the validation tolerance; clamp the complement.
    const double complement = std::max(0.0, 1.0 - out.share_sum[i]);
    if (complement > 0.0) entries.push_back({i, m, complement});
  }
  auto col_ids = shares.col_ids();
  col_ids.push_back(kComplementShiftId);
  out.shares = ShareMatrix(shares.row_ids(), col_ids, entries);

  ShiftTable s = shifts;
  s.ids.push_back(kComplementShiftId);
  s.values.conservativeResize(m + 1);
  s.values[m] = 0.0;
  auto extend = [](std::optional<Labels>& labels) {
    if (labels) labels->push_back(kComplementShiftId);
  };
  extend(s.cluster);
  extend(s.period);
  extend(s.exchange_group);
  extend(s.series);
  for (auto& [_, col] : s.extra) col.push_back("");
  Matrix cov = Matrix::Zero(m + 1, shifts.covariates.cols() + 1);
  if (shifts.covariates.cols() > 0) cov.topLeftCorner(m, shifts.covariates.cols()) = shifts.covariates;
  cov.col(shifts.covariates.cols()).head(m).setOnes();
  s.covariates = cov;
  s.covariate_names.push_back("p_real");
  s.validate();
  out.shifts = std::move(s);
  return out;
}

// ---------------------------------------------------------------------------
// Replacement of thinly supported shifts

struct ReplacementResult {
  ShiftTable shifts;
  std::vector<Index> replaced;  // positions set to zero
  double replaced_fraction = 0.0;
};

/// Sets D_j = 0 wherever the aggregate share w_j falls below the threshold.
inline ReplacementResult replace_shifts(const ShiftTable& shifts, const Vector& aggregate_shares, double threshold = 0.03) {
  if (!(threshold >= 0.0 && threshold < 1.0)) throw ValidationError("replacement threshold must lie in [0, 1)");
  if (aggregate_shares.size() != shifts.size()) {
    throw ValidationError("aggregate shares (" + std::to_string(aggregate_shares.size()) + ") and shifts (" +
                          std::to_string(shifts.size()) + ") are misaligned");
  }
  ReplacementResult r;
  r.shifts = shifts;
  for (Index j = 0; j < shifts.size(); ++j) {
    if (aggregate_shares[j] < threshold) {
      r.shifts.values[j] = 0.0;
      r.replaced.push_back(j);
    }
  }
  r.replaced_fraction = shifts.size() > 0 ? static_cast<double>(r.replaced.size()) / static_cast<double>(shifts.size()) : 0.0;
  return r;
}

/// The same rule applied to the share matrix: columns whose aggregate share
/// falls below the threshold are zeroed. Off unless asked for.
inline ShareMatrix replace_shares(const ShareMatrix& shares, const Vector& aggregate_shares, double threshold = 0.03) {
  if (!(threshold >= 0.0 && threshold < 1.0)) throw ValidationError("replacement threshold must lie in [0, 1)");
  if (aggregate_shares.size() != shares.cols()) throw ValidationError("aggregate shares and share columns are misaligned");
  std::vector<ShareMatrix::Entry> kept;
  for (const auto& e : shares.entries()) {
    if (!(aggregate_shares[e.col] < threshold)) kept.push_back(e);
  }
  return ShareMatrix(shares.row_ids(), shares.col_ids(), kept);
}

// ---------------------------------------------------------------------------
// Residualization

/// Linear specification for the shift mean: optional intercept, numeric
/// covariates and any number of fixed-effect factors (label columns).
struct ResidualizationSpec {
  bool intercept = true;
  std::vector<std::string> covariates;
  std::vector<std::string> fixed_effects;
  double tolerance = 1e-10;
  int max_iterations = 10000;

  bool empty() const { return !intercept && covariates.empty() && fixed_effects.empty(); }

  /// Formula text such as "1", "0", "1 + p_1", "fe(series) + fe(period) + p_1".
  /// Any fixed effect absorbs the intercept.
  static ResidualizationSpec parse(const std::string& text) {
    ResidualizationSpec spec;
    spec.intercept = false;
    bool saw_zero = false, saw_one = false;
    std::stringstream ss(text);
    std::string term;
    while (std::getline(ss, term, '+')) {
      term.erase(0, term.find_first_not_of(" \t"));
      term.erase(term.find_last_not_of(" \t") + 1);
      if (term.empty()) throw ValidationError("empty term in residualization spec '" + text + "'");
      if (term == "1") {
        saw_one = true;
      } else if (term == "0" || term == "none") {
        saw_zero = true;
      } else if (term.rfind("fe(", 0) == 0 && term.back() == ')') {
        spec.fixed_effects.push_back(term.substr(3, term.size() - 4));
      } else {
        spec.covariates.push_back(term);
      }
    }
    if (saw_zero && saw_one) throw ValidationError("residualization spec has both 0 and 1");
    spec.intercept = !saw_zero && (saw_one || spec.fixed_effects.empty());
    return spec;
  }

  std::string to_string() const {
    std::string out;
    auto add = [&](const std::string& t) { out += (out.empty() ? "" : " + ") + t; };
    if (fixed_effects.empty()) add(intercept ? "1" : "0");
    for (const auto& fe : fixed_effects) add("fe(" + fe + ")");
    for (const auto& c : covariates) add(c);
    return out;
  }
};

struct ShiftResiduals {
  Vector eta_hat;       // D_j - fitted_j
  Vector fitted;
  ResidualizationSpec spec;
  Vector weights_used;  // w_j
  double sse_ratio = 0.0;  // Σ w η̂² / Σ w D²
  int iterations = 0;      // alternating-projection sweeps (0 when closed form)
};

namespace detail {

struct Factor {
  std::string name;
  std::vector<Index> code;  // level per shift
  Index levels = 0;
};

inline Factor encode_factor(const std::string& name, const Labels& labels) {
  Factor f;
  f.name = name;
  std::map<std::string, Index> lookup;
  for (const auto& l : labels) {
    auto [it, inserted] = lookup.emplace(l, static_cast<Index>(lookup.size()));
    f.code.push_back(it->second);
  }
  f.levels = static_cast<Index>(lookup.size());
  return f;
}

// One weighted demeaning sweep over a factor; cells without weight are left alone.
inline void demean_by(const Factor& f, const Vector& w, Vector& x) {
  std::vector<CompensatedSum> num(static_cast<std::size_t>(f.levels)), den(static_cast<std::size_t>(f.levels));
  for (Index j = 0; j < x.size(); ++j) {
    const auto c = static_cast<std::size_t>(f.code[static_cast<std::size_t>(j)]);
    num[c] += w[j] * x[j];
    den[c] += w[j];
  }
  std::vector<double> mean(static_cast<std::size_t>(f.levels), 0.0);
  for (std::size_t c = 0; c < mean.size(); ++c) {
    const double d = den[c].value();
    if (d > 0.0) mean[c] = num[c].value() / d;
  }
  for (Index j = 0; j < x.size(); ++j) x[j] -= mean[static_cast<std::size_t>(f.code[static_cast<std::size_t>(j)])];
}

// Alternating weighted projections onto the orthogonal complement of all factors.
inline int demean_factors(const std::vector<Factor>& factors, const Vector& w, Vector& x, double tol, int max_iter) {
  if (factors.empty()) return 0;
  if (factors.size() == 1) {
    demean_by(factors[0], w, x);
    return 1;
  }
  for (int iter = 1; iter <= max_iter; ++iter) {
    const Vector before = x;
    for (const auto& f : factors) demean_by(f, w, x);
    const double scale = 1.0 + before.cwiseAbs().maxCoeff();
    if ((x - before).cwiseAbs().maxCoeff() <= tol * scale) return iter;
  }
  throw NumericalError("fixed-effect demeaning did not converge within " + std::to_string(max_iter) + " sweeps");
}

}  // namespace detail

/// η̂_j = D_j minus its w_j-weighted least-squares fit on the specification.
/// The shift universe may contain shifts that carry zero weight; they are
/// residualized with the coefficients estimated from the weighted ones.
inline ShiftResiduals residualize_shifts(const ShiftTable& shifts, const ResidualizationSpec& spec, const Vector& shift_weights) {
  shifts.validate();
  const Index m = shifts.size();
  if (shift_weights.size() != m) throw ValidationError("shift weights and shifts differ in length");
  if (!shift_weights.allFinite() || (shift_weights.array() < 0.0).any()) {
    throw ValidationError("shift weights must be finite and nonnegative");
  }
  if (!(shift_weights.sum() > 0.0)) throw ValidationError("shift weights sum to zero");

  std::vector<detail::Factor> factors;
  for (const auto& name : spec.fixed_effects) factors.push_back(detail::encode_factor(name, shifts.labels(name)));

  Labels names;
  Matrix cov(m, 0);
  if (spec.intercept && factors.empty()) {
    cov = Matrix::Ones(m, 1);
    names.push_back("(intercept)");
  }
  for (const auto& c : spec.covariates) {
    cov.conservativeResize(m, cov.cols() + 1);
    cov.col(cov.cols() - 1) = shifts.numeric(c);
    names.push_back(c);
  }

  ShiftResiduals r;
  r.spec = spec;
  r.weights_used = shift_weights;
  Vector d = shifts.values;
  int sweeps = detail::demean_factors(factors, shift_weights, d, spec.tolerance, spec.max_iterations);
  for (Index k = 0; k < cov.cols(); ++k) {
    Vector col = cov.col(k);
    sweeps = std::max(sweeps, detail::demean_factors(factors, shift_weights, col, spec.tolerance, spec.max_iterations));
    if (!factors.empty() && col.cwiseAbs().maxCoeff() <= kRankTolerance * (1.0 + cov.col(k).cwiseAbs().maxCoeff())) {
      throw NumericalError("rank-deficient design; collinear terms: " + names[static_cast<std::size_t>(k)] +
                           " is absorbed by the fixed effects");
    }
    cov.col(k) = col;
  }
  const WeightedProjector projector(cov, shift_weights, names);
  r.eta_hat = projector.residualize(d);
  r.fitted = shifts.values - r.eta_hat;
  r.iterations = factors.size() > 1 ? sweeps : 0;
  const double raw = weighted_dot(shift_weights, shifts.values, shifts.values);
  r.sse_ratio = raw > 0.0 ? std::clamp(weighted_dot(shift_weights, r.eta_hat, r.eta_hat) / raw, 0.0, 1.0) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Leave-one-out estimated shifts

struct LeaveOneOutResult {
  Vector instrument;          // Z_k; NaN where undefined
  std::vector<bool> defined;
  Labels warnings;
};

/// Z_k = Σ_j w_kj D̂_{j,-k}. Normalized mode divides by Σ_{i≠k} w_ij so the
/// estimated shift stays a weighted average; a shift whose whole weight
/// comes from unit k leaves that unit's instrument undefined.
inline LeaveOneOutResult leave_one_out_shifts(const Matrix& unit_shifts, const ShareMatrix& shares, bool normalized = true) {
  const Index n = shares.rows();
  const Index m = shares.cols();
  if (unit_shifts.rows() != n || unit_shifts.cols() != m) {
    throw ValidationError("unit shift matrix must be " + std::to_string(n) + "x" + std::to_string(m));
  }
  const auto& w = shares.weights();
  std::vector<CompensatedSum> num(static_cast<std::size_t>(m)), den(static_cast<std::size_t>(m));
  for (Index i = 0; i < w.outerSize(); ++i) {
    for (ShareMatrix::Sparse::InnerIterator it(w, i); it; ++it) {
      if (!std::isfinite(unit_shifts(i, it.col()))) {
        throw ValidationError("unit shift for unit '" + shares.row_ids()[static_cast<std::size_t>(i)] + "', shift '" +
                              shares.col_ids()[static_cast<std::size_t>(it.col())] + "' is not finite");
      }
      num[static_cast<std::size_t>(it.col())] += it.value() * unit_shifts(i, it.col());
      den[static_cast<std::size_t>(it.col())] += it.value();
    }
  }
  LeaveOneOutResult r;
  r.instrument = Vector::Zero(n);
  r.defined.assign(static_cast<std::size_t>(n), true);
  for (Index k = 0; k < w.outerSize(); ++k) {
    CompensatedSum z;
    for (ShareMatrix::Sparse::InnerIterator it(w, k); it; ++it) {
      const auto j = static_cast<std::size_t>(it.col());
      const double own = it.value();
      const double rest_num = num[j].value() - own * unit_shifts(k, it.col());
      if (!normalized) {
        z += own * rest_num;
        continue;
      }
      const double rest_den = den[j].value() - own;
      if (!(rest_den > 0.0)) {
        r.defined[static_cast<std::size_t>(k)] = false;
        r.warnings.push_back("shift '" + shares.col_ids()[j] + "' draws all its weight from unit '" +
                             shares.row_ids()[static_cast<std::size_t>(k)] + "'; leave-one-out instrument undefined");
        continue;
      }
      z += own * rest_num / rest_den;
    }
    r.instrument[k] = r.defined[static_cast<std::size_t>(k)] ? z.value() : kNaN;
  }
  return r;
}

}  // namespace shiftshare
