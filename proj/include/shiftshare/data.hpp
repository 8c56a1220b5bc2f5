#pragma once

#include <Eigen/Sparse>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "shiftshare/error.hpp"
#include "shiftshare/numeric.hpp"

namespace shiftshare {

inline constexpr double kRowSumTolerance = 1e-9;

using Labels = std::vector<std::string>;

namespace detail {

/// Shortest text that parses back to the same double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return ec == std::errc() ? std::string(buf, end) : std::string("nan");
}

inline void require_unique(const Labels& ids, const std::string& what) {
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw ValidationError("duplicate " + what + " id '" + id + "'");
  }
}

}  // namespace detail

/// n units by m shifts of nonnegative exposure weights w_ij.
///
/// Immutable once built. Every entry is finite and >= 0, and every row sums
/// to at most 1 + 1e-9; rows above that are rejected, never renormalized.
/// All-zero rows are legal and reported by zero_rows().
class ShareMatrix {
 public:
  using Sparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;

  struct Entry {
    Index row;
    Index col;
    double weight;
  };

  ShareMatrix() = default;

  ShareMatrix(Labels row_ids, Labels col_ids, const std::vector<Entry>& entries)
      : row_ids_(std::move(row_ids)), col_ids_(std::move(col_ids)) {
    detail::require_unique(row_ids_, "unit");
    detail::require_unique(col_ids_, "shift");
    const Index n = static_cast<Index>(row_ids_.size());
    const Index m = static_cast<Index>(col_ids_.size());
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(entries.size());
    std::set<std::pair<Index, Index>> seen;
    for (const auto& e : entries) {
      if (e.row < 0 || e.row >= n || e.col < 0 || e.col >= m) {
        throw ValidationError("share entry (" + std::to_string(e.row) + ", " + std::to_string(e.col) +
                              ") outside a " + std::to_string(n) + "x" + std::to_string(m) + " matrix");
      }
      if (!std::isfinite(e.weight)) {
        throw ValidationError("non-finite share at unit '" + unit_label(e.row) + "', shift '" +
                              shift_label(e.col) + "'");
      }
      if (e.weight < 0.0) {
        throw ValidationError("negative share " + detail::format_double(e.weight) + " at unit '" +
                              unit_label(e.row) + "', shift '" + shift_label(e.col) + "'");
      }
      if (!seen.insert({e.row, e.col}).second) {
        throw ValidationError("duplicate share entry for unit '" + unit_label(e.row) + "', shift '" +
                              shift_label(e.col) + "'");
      }
      if (e.weight != 0.0) triplets.emplace_back(e.row, e.col, e.weight);
    }
    w_.resize(n, m);
    w_.setFromTriplets(triplets.begin(), triplets.end());
    w_.makeCompressed();
    check_row_sums();
  }

  static ShareMatrix from_dense(Labels row_ids, Labels col_ids, const Matrix& dense) {
    if (dense.rows() != static_cast<Index>(row_ids.size()) ||
        dense.cols() != static_cast<Index>(col_ids.size())) {
      throw ValidationError("dense share matrix dimensions do not match its ids");
    }
    std::vector<Entry> entries;
    for (Index i = 0; i < dense.rows(); ++i) {
      for (Index j = 0; j < dense.cols(); ++j) {
        if (dense(i, j) != 0.0 || !std::isfinite(dense(i, j))) entries.push_back({i, j, dense(i, j)});
      }
    }
    return ShareMatrix(std::move(row_ids), std::move(col_ids), entries);
  }

  /// Convenience for tests and simulations: ids "u0..", "s0..".
  static ShareMatrix from_dense(const Matrix& dense) {
    return from_dense(make_ids("u", dense.rows()), make_ids("s", dense.cols()), dense);
  }

  static Labels make_ids(const std::string& prefix, Index count) {
    Labels ids;
    ids.reserve(static_cast<std::size_t>(count));
    for (Index k = 0; k < count; ++k) ids.push_back(prefix + std::to_string(k));
    return ids;
  }

  Index rows() const { return w_.rows(); }
  Index cols() const { return w_.cols(); }
  const Labels& row_ids() const { return row_ids_; }
  const Labels& col_ids() const { return col_ids_; }
  const Sparse& weights() const { return w_; }
  double operator()(Index i, Index j) const { return w_.coeff(i, j); }

  Matrix dense() const { return Matrix(w_); }

  std::vector<Entry> entries() const {
    std::vector<Entry> out;
    out.reserve(static_cast<std::size_t>(w_.nonZeros()));
    for (Index i = 0; i < w_.outerSize(); ++i) {
      for (Sparse::InnerIterator it(w_, i); it; ++it) out.push_back({it.row(), it.col(), it.value()});
    }
    return out;
  }

  Vector row_sums() const {
    Vector s = Vector::Zero(rows());
    for (Index i = 0; i < w_.outerSize(); ++i) {
      CompensatedSum acc;
      for (Sparse::InnerIterator it(w_, i); it; ++it) acc += it.value();
      s[i] = acc.value();
    }
    return s;
  }

  /// w_j = Σ_i e_i w_ij.
  Vector shift_weights(const Vector& unit_weights) const {
    if (unit_weights.size() != rows()) throw ValidationError("unit weight length does not match share rows");
    return w_.transpose() * unit_weights;
  }

  /// Unweighted column sums Σ_i w_ij.
  Vector column_sums() const { return shift_weights(Vector::Ones(rows())); }

  std::vector<Index> zero_rows() const {
    std::vector<Index> out;
    for (Index i = 0; i < w_.outerSize(); ++i) {
      bool any = false;
      for (Sparse::InnerIterator it(w_, i); it; ++it) any = any || it.value() != 0.0;
      if (!any) out.push_back(i);
    }
    return out;
  }

  bool is_complete(double tol = kRowSumTolerance) const {
    const Vector s = row_sums();
    return ((s.array() - 1.0).abs() <= tol).all();
  }

  /// X = W d.
  Vector apply(const Vector& d) const {
    if (d.size() != cols()) {
      throw ValidationError("shift vector has length " + std::to_string(d.size()) + " but shares have " +
                            std::to_string(cols()) + " columns");
    }
    return w_ * d;
  }

  /// W' v.
  Vector apply_transpose(const Vector& v) const {
    if (v.size() != rows()) throw ValidationError("unit vector length does not match share rows");
    return w_.transpose() * v;
  }

 private:
  std::string unit_label(Index i) const {
    return i < static_cast<Index>(row_ids_.size()) ? row_ids_[static_cast<std::size_t>(i)] : std::to_string(i);
  }
  std::string shift_label(Index j) const {
    return j < static_cast<Index>(col_ids_.size()) ? col_ids_[static_cast<std::size_t>(j)] : std::to_string(j);
  }

  void check_row_sums() const {
    const Vector s = row_sums();
    for (Index i = 0; i < s.size(); ++i) {
      if (s[i] > 1.0 + kRowSumTolerance) {
        throw ValidationError("shares of unit '" + unit_label(i) + "' (row " + std::to_string(i) +
                              ") sum to " + detail::format_double(s[i]) + ", exceeding 1 + 1e-9");
      }
    }
  }

  Labels row_ids_;
  Labels col_ids_;
  Sparse w_;
};

/// m shift values D_j with optional labels and shift-level covariates p_j.
struct ShiftTable {
  Labels ids;
  Vector values;
  std::optional<Labels> cluster;
  std::optional<Labels> period;
  std::optional<Labels> exchange_group;
  // Identity of a shift across periods (long-form panels); used for lags.
  std::optional<Labels> series;
  Labels covariate_names;
  Matrix covariates;  // m x k
  std::map<std::string, Labels> extra;

  Index size() const { return values.size(); }

  void validate() const {
    const auto m = static_cast<std::size_t>(values.size());
    if (ids.size() != m) throw ValidationError("shift ids and values differ in length");
    detail::require_unique(ids, "shift");
    for (Index j = 0; j < values.size(); ++j) {
      if (!std::isfinite(values[j])) throw ValidationError("non-finite shift value for shift '" + ids[static_cast<std::size_t>(j)] + "'");
    }
    auto check = [&](const std::optional<Labels>& labels, const char* name) {
      if (labels && labels->size() != m) {
        throw ValidationError(std::string(name) + " labels cover " + std::to_string(labels->size()) + " of " +
                              std::to_string(m) + " shifts");
      }
    };
    check(cluster, "cluster");
    check(period, "period");
    check(exchange_group, "exchange_group");
    check(series, "series");
    for (const auto& [name, col] : extra) {
      if (col.size() != m) throw ValidationError("shift column '" + name + "' has the wrong length");
    }
    if (covariates.size() > 0 || !covariate_names.empty()) {
      if (covariates.rows() != values.size() || covariates.cols() != static_cast<Index>(covariate_names.size())) {
        throw ValidationError("shift covariate matrix does not match its names or the shift count");
      }
      if (!covariates.allFinite()) throw ValidationError("non-finite shift covariate");
    }
  }

  /// Label column by name: cluster, period, exchange_group, series, an extra
  /// column, or a covariate rendered as text.
  Labels labels(const std::string& name) const {
    auto pick = [&](const std::optional<Labels>& l) -> Labels {
      if (!l) throw SchemaError("shift table has no '" + name + "' column");
      return *l;
    };
    if (name == "cluster") return pick(cluster);
    if (name == "period") return pick(period);
    if (name == "exchange_group") return pick(exchange_group);
    if (name == "series") return pick(series);
    if (auto it = extra.find(name); it != extra.end()) return it->second;
    if (auto k = covariate_index(name)) {
      Labels out;
      for (Index j = 0; j < size(); ++j) out.push_back(detail::format_double(covariates(j, *k)));
      return out;
    }
    throw SchemaError("shift table has no '" + name + "' column");
  }

  std::optional<Index> covariate_index(const std::string& name) const {
    for (std::size_t k = 0; k < covariate_names.size(); ++k) {
      if (covariate_names[k] == name) return static_cast<Index>(k);
    }
    return std::nullopt;
  }

  /// Numeric column by name: value, a covariate, or a parseable extra column.
  Vector numeric(const std::string& name) const;

  static ShiftTable from_values(const Vector& values) {
    ShiftTable t;
    t.ids = ShareMatrix::make_ids("s", values.size());
    t.values = values;
    t.covariates = Matrix(values.size(), 0);
    return t;
  }
};

/// Unit-level data: outcome Y_i, optional regressor X_i, controls, weights.
struct Dataset {
  Labels unit_ids;
  Vector outcome;
  std::optional<Vector> regressor;
  Labels control_names;
  Matrix controls;  // n x k, no intercept
  Vector raw_weights;   // as supplied
  Vector unit_weights;  // normalized to sum 1
  std::map<std::string, Labels> labels;

  Index size() const { return outcome.size(); }

  void validate() const {
    const Index n = outcome.size();
    if (static_cast<Index>(unit_ids.size()) != n) throw ValidationError("unit ids and outcome differ in length");
    detail::require_unique(unit_ids, "unit");
    if (!outcome.allFinite()) throw ValidationError("non-finite outcome value");
    if (regressor) {
      if (regressor->size() != n) throw ValidationError("regressor length differs from outcome");
      if (!regressor->allFinite()) throw ValidationError("non-finite regressor value");
    }
    if (controls.rows() != n || controls.cols() != static_cast<Index>(control_names.size())) {
      throw ValidationError("control matrix does not match unit count or control names");
    }
    if (!controls.allFinite()) throw ValidationError("non-finite control value");
    if (unit_weights.size() != n) throw ValidationError("unit weight length differs from outcome");
    if ((unit_weights.array() < 0.0).any()) throw ValidationError("negative unit weight");
    if (std::abs(compensated_sum(unit_weights) - 1.0) > 1e-12) throw ValidationError("unit weights do not sum to 1");
    for (const auto& [name, col] : labels) {
      if (static_cast<Index>(col.size()) != n) throw ValidationError("unit column '" + name + "' has the wrong length");
    }
  }

  const Labels& label(const std::string& name) const {
    auto it = labels.find(name);
    if (it == labels.end()) throw SchemaError("unit table has no '" + name + "' column");
    return it->second;
  }

  /// Numeric column by name: y, x, w_e, a control, or a parseable label column.
  Vector numeric(const std::string& name) const;

  /// Builds a dataset with weights normalized to sum 1 (equal weights when empty).
  static Dataset make(Labels unit_ids, Vector outcome, std::optional<Vector> regressor = std::nullopt,
                      Matrix controls = Matrix(), Labels control_names = {}, Vector raw_weights = Vector()) {
    Dataset d;
    const Index n = outcome.size();
    d.unit_ids = unit_ids.empty() ? ShareMatrix::make_ids("u", n) : std::move(unit_ids);
    d.outcome = std::move(outcome);
    d.regressor = std::move(regressor);
    d.controls = controls.size() == 0 && control_names.empty() ? Matrix(n, 0) : std::move(controls);
    d.control_names = std::move(control_names);
    d.raw_weights = raw_weights.size() == 0 ? Vector::Ones(n) : std::move(raw_weights);
    if (d.raw_weights.size() != n) throw ValidationError("unit weight length differs from outcome");
    if (!d.raw_weights.allFinite() || (d.raw_weights.array() < 0.0).any()) {
      throw ValidationError("unit weights must be finite and nonnegative");
    }
    const double total = compensated_sum(d.raw_weights);
    if (!(total > 0.0)) throw ValidationError("unit weights sum to zero");
    d.unit_weights = d.raw_weights / total;
    d.validate();
    return d;
  }
};

namespace detail {

/// Strict full-field parse of a 64-bit float; "nan"/"NA" parse to NaN.
inline std::optional<double> parse_double(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  if (b == e) return std::nullopt;
  std::string_view field(s.data() + b, e - b);
  if (field == "NA" || field == "nan" || field == "NaN") return kNaN;
  if (field.front() == '+') field.remove_prefix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) return std::nullopt;
  return value;
}

inline Vector parse_numeric_labels(const Labels& col, const std::string& name) {
  Vector out(static_cast<Index>(col.size()));
  for (std::size_t i = 0; i < col.size(); ++i) {
    auto v = parse_double(col[i]);
    if (!v) throw ValidationError("column '" + name + "' row " + std::to_string(i + 1) + ": '" + col[i] + "' is not a number");
    out[static_cast<Index>(i)] = *v;
  }
  return out;
}

}  // namespace detail

inline Vector ShiftTable::numeric(const std::string& name) const {
  if (name == "value") return values;
  if (auto k = covariate_index(name)) return covariates.col(*k);
  if (auto it = extra.find(name); it != extra.end()) return detail::parse_numeric_labels(it->second, name);
  if (name == "period" && period) return detail::parse_numeric_labels(*period, name);
  throw SchemaError("shift table has no numeric '" + name + "' column");
}

inline Vector Dataset::numeric(const std::string& name) const {
  if (name == "y") return outcome;
  if (name == "x") {
    if (!regressor) throw SchemaError("unit table has no 'x' column");
    return *regressor;
  }
  if (name == "w_e") return raw_weights;
  for (std::size_t k = 0; k < control_names.size(); ++k) {
    if (control_names[k] == name) return controls.col(static_cast<Index>(k));
  }
  return detail::parse_numeric_labels(label(name), name);
}

/// Row and column bookkeeping of a long-form panel.
struct PanelIndex {
  std::vector<std::pair<Index, Index>> unit_period;   // row -> (unit, period)
  std::vector<std::pair<Index, Index>> shift_period;  // column -> (shift, period)
  Labels period_labels;
};

struct LongForm {
  ShareMatrix shares;
  ShiftTable shifts;
  PanelIndex index;
};

/// Stacks T per-period share matrices into one (n*T) x (m*T) block-diagonal
/// matrix and concatenates the shift tables. Row k*n + i is unit i in period
/// k; column k*m + j is shift j in period k.
inline LongForm to_long_form(const std::vector<ShareMatrix>& shares, const std::vector<ShiftTable>& shifts,
                             Labels period_labels = {}) {
  if (shares.empty()) throw ValidationError("no periods supplied");
  if (shares.size() != shifts.size()) throw ValidationError("share and shift period counts differ");
  const std::size_t T = shares.size();
  if (period_labels.empty()) {
    for (std::size_t t = 0; t < T; ++t) period_labels.push_back(std::to_string(t));
  }
  if (period_labels.size() != T) throw ValidationError("period labels do not match period count");
  const Index n = shares[0].rows();
  const Index m = shares[0].cols();
  for (std::size_t t = 0; t < T; ++t) {
    shifts[t].validate();
    if (shares[t].rows() != n || shares[t].cols() != m) {
      throw ValidationError("period " + period_labels[t] + " has a " + std::to_string(shares[t].rows()) + "x" +
                            std::to_string(shares[t].cols()) + " share matrix; expected " + std::to_string(n) +
                            "x" + std::to_string(m));
    }
    if (shifts[t].size() != m) throw ValidationError("period " + period_labels[t] + " has the wrong number of shifts");
    if (shares[t].row_ids() != shares[0].row_ids()) {
      throw ValidationError("unit ids differ between periods " + period_labels[0] + " and " + period_labels[t]);
    }
    if (shifts[t].covariate_names != shifts[0].covariate_names) {
      throw ValidationError("shift covariates differ between periods");
    }
  }
  if (T == 1) {
    PanelIndex index;
    index.period_labels = period_labels;
    for (Index i = 0; i < n; ++i) index.unit_period.emplace_back(i, 0);
    for (Index j = 0; j < m; ++j) index.shift_period.emplace_back(j, 0);
    return {shares[0], shifts[0], std::move(index)};
  }

  Labels row_ids, col_ids;
  std::vector<ShareMatrix::Entry> entries;
  PanelIndex index;
  index.period_labels = period_labels;
  ShiftTable out;
  const Index k_cov = static_cast<Index>(shifts[0].covariate_names.size());
  out.covariate_names = shifts[0].covariate_names;
  out.covariates = Matrix(m * static_cast<Index>(T), k_cov);
  out.values = Vector(m * static_cast<Index>(T));
  Labels period, series, cluster, group;
  for (std::size_t t = 0; t < T; ++t) {
    const Index tt = static_cast<Index>(t);
    for (Index i = 0; i < n; ++i) {
      row_ids.push_back(shares[t].row_ids()[static_cast<std::size_t>(i)] + "@" + period_labels[t]);
      index.unit_period.emplace_back(i, tt);
    }
    for (const auto& e : shares[t].entries()) entries.push_back({e.row + tt * n, e.col + tt * m, e.weight});
    for (Index j = 0; j < m; ++j) {
      const auto& id = shifts[t].ids[static_cast<std::size_t>(j)];
      col_ids.push_back(id + "@" + period_labels[t]);
      index.shift_period.emplace_back(j, tt);
      out.values[tt * m + j] = shifts[t].values[j];
      if (k_cov > 0) out.covariates.row(tt * m + j) = shifts[t].covariates.row(j);
      period.push_back(period_labels[t]);
      series.push_back(shifts[t].series ? (*shifts[t].series)[static_cast<std::size_t>(j)] : id);
      if (shifts[t].cluster) cluster.push_back((*shifts[t].cluster)[static_cast<std::size_t>(j)]);
      if (shifts[t].exchange_group) group.push_back((*shifts[t].exchange_group)[static_cast<std::size_t>(j)]);
    }
  }
  out.ids = col_ids;
  out.period = std::move(period);
  out.series = std::move(series);
  if (cluster.size() == out.ids.size()) out.cluster = std::move(cluster);
  if (group.size() == out.ids.size()) out.exchange_group = std::move(group);
  out.validate();
  return {ShareMatrix(std::move(row_ids), std::move(col_ids), entries), std::move(out), std::move(index)};
}

}  // namespace shiftshare
