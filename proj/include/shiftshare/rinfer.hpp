#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "shiftshare/data.hpp"
#include "shiftshare/estimate.hpp"
#include "shiftshare/numeric.hpp"

namespace shiftshare {

enum class Enumeration { automatic, always, never };

struct RiOptions {
  std::int64_t draws = 2000;
  std::uint64_t seed = 20240101;
  Enumeration enumeration = Enumeration::automatic;
  double level = 0.95;
  std::optional<std::string> group_column;  // defaults to exchange_group, else one group
};

struct RiTest {
  double beta0 = kNaN;
  double statistic = kNaN;  // T(β0) = Σ_i e_i Z_i (Y⊥_i - β0 X⊥_i)
  double center = kNaN;     // exact mean of T over within-group permutations
  double p_value = kNaN;
  std::vector<double> distribution;
  std::int64_t draws = 0;
  bool exhaustive = false;
  std::uint64_t seed = 0;
  Labels warnings;
};

struct RiGrid {
  double lower = kNaN;
  double upper = kNaN;
  int points = 21;
};

struct RiResult {
  std::vector<double> beta_grid;
  std::vector<double> stat_observed;
  std::vector<std::vector<double>> stat_distribution;
  std::vector<double> p_values;
  double point_estimate = kNaN;
  double p_at_point = kNaN;
  double ci_lower = kNaN;
  double ci_upper = kNaN;
  double level = 0.95;
  std::int64_t draws = 0;
  bool exhaustive = false;
  std::uint64_t seed = 0;
  Labels warnings;
};

/// Permutation design for T(β) = Σ_j D_j (a_j - β b_j), where
/// a_j = Σ_i e_i w_ij Y⊥_i and b_j = Σ_i e_i w_ij X⊥_i. Every permuted
/// assignment is stored as the pair (A, B) so T for any β is A - β B.
class RandomizationDesign {
 public:
  RandomizationDesign(const Dataset& data, const ShareMatrix& shares, const ShiftTable& shifts, const Controls& controls,
                      const RiOptions& opts)
      : opts_(opts) {
    data.validate();
    shifts.validate();
    if (!data.regressor) throw SchemaError("randomization inference needs a regressor column 'x'");
    if (shares.rows() != data.size() || shares.cols() != shifts.size()) throw ValidationError("shares, units and shifts are misaligned");
    if (!(opts.level > 0.0 && opts.level < 1.0)) throw ValidationError("confidence level must lie in (0, 1)");
    const Vector& e = data.unit_weights;
    const WeightedProjector projector(controls.values, e, controls.names);
    a_ = shares.apply_transpose(e.cwiseProduct(projector.residualize(data.outcome)));
    b_ = shares.apply_transpose(e.cwiseProduct(projector.residualize(*data.regressor)));
    d_ = shifts.values;

    Labels labels;
    if (opts.group_column) labels = shifts.labels(*opts.group_column);
    else if (shifts.exchange_group) labels = *shifts.exchange_group;
    else labels = Labels(static_cast<std::size_t>(shifts.size()), "all");
    std::map<std::string, std::size_t> lookup;
    for (Index j = 0; j < shifts.size(); ++j) {
      auto [it, inserted] = lookup.emplace(labels[static_cast<std::size_t>(j)], groups_.size());
      if (inserted) groups_.emplace_back();
      groups_[it->second].push_back(j);
    }
    for (const auto& [name, g] : lookup) {
      if (groups_[g].size() < 2) {
        throw ValidationError("exchange group '" + name + "' has a single shift; every group needs at least 2");
      }
    }
    // Exact permutation mean: each shift is replaced by its group mean.
    mean_d_ = Vector(d_.size());
    for (const auto& g : groups_) {
      CompensatedSum s;
      for (Index j : g) s += d_[j];
      const double mean = s.value() / static_cast<double>(g.size());
      for (Index j : g) mean_d_[j] = mean;
    }
    a_obs_ = dot(d_, a_);
    b_obs_ = dot(d_, b_);
    a_center_ = dot(mean_d_, a_);
    b_center_ = dot(mean_d_, b_);
    if (opts.draws < 1) throw ValidationError("draws must be positive");
    if (opts.draws < 100) warnings_.push_back("only " + std::to_string(opts.draws) + " randomization draws (< 100)");
    draw();
  }

  double statistic(double beta) const { return a_obs_ - beta * b_obs_; }
  double center(double beta) const { return a_center_ - beta * b_center_; }

  std::vector<double> distribution(double beta) const {
    std::vector<double> out(perm_a_.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = perm_a_[k] - beta * perm_b_[k];
    return out;
  }

  /// Share of the reference set at least as far from the permutation mean as
  /// the observed statistic. Sampled draws add the observed assignment.
  double p_value(double beta) const {
    const double dev_a = a_obs_ - a_center_, dev_b = b_obs_ - b_center_;
    const double observed = std::abs(dev_a - beta * dev_b);
    const double tol = 1e-10 * (scale_a_ + std::abs(beta) * scale_b_);
    std::int64_t extreme = 0;
    for (std::size_t k = 0; k < perm_a_.size(); ++k) {
      const double dev = std::abs((perm_a_[k] - a_center_) - beta * (perm_b_[k] - b_center_));
      if (dev >= observed - tol) ++extreme;
    }
    if (exhaustive_) return static_cast<double>(extreme) / static_cast<double>(perm_a_.size());
    return static_cast<double>(1 + extreme) / static_cast<double>(1 + perm_a_.size());
  }

  /// β solving T_obs(β) = mean of the permutation distribution.
  double point_estimate() const {
    const double den = b_obs_ - b_center_;
    if (!(std::abs(den) > 1e-14 * scale_b_)) {
      throw NumericalError("the observed first-stage moment equals its permutation mean; no point estimate");
    }
    return (a_obs_ - a_center_) / den;
  }

  std::int64_t draws() const { return static_cast<std::int64_t>(perm_a_.size()); }
  bool exhaustive() const { return exhaustive_; }
  const Labels& warnings() const { return warnings_; }
  const std::vector<std::vector<Index>>& groups() const { return groups_; }

 private:
  static double dot(const Vector& x, const Vector& y) {
    CompensatedSum s;
    for (Index j = 0; j < x.size(); ++j) s += x[j] * y[j];
    return s.value();
  }

  // Number of within-group permutations, saturating at the cap.
  double permutation_count() const {
    double total = 1.0;
    for (const auto& g : groups_) {
      for (std::size_t k = 2; k <= g.size(); ++k) total *= static_cast<double>(k);
      if (total > 1e12) return total;
    }
    return total;
  }

  void draw() {
    const double count = permutation_count();
    bool enumerate = false;
    switch (opts_.enumeration) {
      case Enumeration::always:
        if (count > 1e7) throw ValidationError("too many permutations to enumerate (" + detail::format_double(count) + ")");
        enumerate = true;
        break;
      case Enumeration::automatic:
        enumerate = count <= static_cast<double>(opts_.draws);
        break;
      case Enumeration::never:
        break;
    }
    double spread = 0.0;
    for (Index j = 0; j < d_.size(); ++j) spread = std::max(spread, std::abs(d_[j] - mean_d_[j]));
    scale_a_ = spread * a_.cwiseAbs().sum();
    scale_b_ = spread * b_.cwiseAbs().sum();
    exhaustive_ = enumerate;
    if (enumerate) {
      enumerate_all();
    } else {
      sample(opts_.draws);
    }
  }

  void enumerate_all() {
    std::vector<std::vector<Index>> order;
    for (const auto& g : groups_) order.push_back(g);
    Vector permuted = d_;
    perm_a_.clear();
    perm_b_.clear();
    // Odometer over groups; each group cycles through next_permutation.
    for (;;) {
      for (std::size_t g = 0; g < groups_.size(); ++g) {
        for (std::size_t k = 0; k < groups_[g].size(); ++k) permuted[groups_[g][k]] = d_[order[g][k]];
      }
      perm_a_.push_back(dot(permuted, a_));
      perm_b_.push_back(dot(permuted, b_));
      std::size_t g = 0;
      while (g < order.size() && !std::next_permutation(order[g].begin(), order[g].end())) ++g;
      if (g == order.size()) break;
    }
  }

  void sample(std::int64_t draws) {
    perm_a_.assign(static_cast<std::size_t>(draws), 0.0);
    perm_b_.assign(static_cast<std::size_t>(draws), 0.0);
#pragma omp parallel for schedule(static)
    for (std::int64_t k = 0; k < draws; ++k) {
      RandomStream rng(opts_.seed, static_cast<std::uint64_t>(k), 0x52494E46ULL);
      Vector permuted = d_;
      for (const auto& g : groups_) {
        std::vector<double> values;
        values.reserve(g.size());
        for (Index j : g) values.push_back(d_[j]);
        shuffle_with(values.begin(), values.end(), rng);
        for (std::size_t t = 0; t < g.size(); ++t) permuted[g[t]] = values[t];
      }
      perm_a_[static_cast<std::size_t>(k)] = dot(permuted, a_);
      perm_b_[static_cast<std::size_t>(k)] = dot(permuted, b_);
    }
  }

  RiOptions opts_;
  Vector a_, b_, d_, mean_d_;
  std::vector<std::vector<Index>> groups_;
  double a_obs_ = 0.0, b_obs_ = 0.0, a_center_ = 0.0, b_center_ = 0.0;
  double scale_a_ = 0.0, scale_b_ = 0.0;
  std::vector<double> perm_a_, perm_b_;
  bool exhaustive_ = false;
  Labels warnings_;
};

/// Sharp-null test of β = β0 by permuting shifts within exchange groups.
inline RiTest ri_test(const Dataset& data, const ShareMatrix& shares, const ShiftTable& shifts, const Controls& controls,
                      double beta0, const RiOptions& opts = {}) {
  const RandomizationDesign design(data, shares, shifts, controls, opts);
  RiTest t;
  t.beta0 = beta0;
  t.statistic = design.statistic(beta0);
  t.center = design.center(beta0);
  t.p_value = design.p_value(beta0);
  t.distribution = design.distribution(beta0);
  t.draws = design.draws();
  t.exhaustive = design.exhaustive();
  t.seed = opts.seed;
  t.warnings = design.warnings();
  return t;
}

namespace detail {

// Bisection for the boundary between accepted (p > α) at `inside` and
// rejected at `outside`, to 1e-6 in β.
inline double bisect_boundary(const RandomizationDesign& design, double inside, double outside, double alpha) {
  while (std::abs(outside - inside) > 1e-6 * std::max(1.0, std::abs(inside)) && std::abs(outside - inside) > 1e-6) {
    const double mid = 0.5 * (inside + outside);
    if (design.p_value(mid) > alpha) inside = mid;
    else outside = mid;
  }
  return 0.5 * (inside + outside);
}

inline double find_rejection(const RandomizationDesign& design, double start, double direction, double step, double alpha,
                             std::optional<double> bound) {
  if (bound) {
    if (design.p_value(*bound) > alpha) {
      throw NumericalError("confidence bound not bracketed: p-value at " + format_double(*bound) +
                           " still exceeds the test level; widen the grid bounds");
    }
    return *bound;
  }
  double candidate = start;
  for (int k = 0; k < 80; ++k) {
    candidate = start + direction * step;
    if (design.p_value(candidate) <= alpha) return candidate;
    step *= 2.0;
  }
  throw NumericalError("confidence set appears unbounded (no rejection found up to " + format_double(candidate) +
                       "); supply explicit grid bounds or check instrument strength");
}

}  // namespace detail

/// Point estimate (closed form) and confidence interval by test inversion.
inline RiResult ri_estimate(const Dataset& data, const ShareMatrix& shares, const ShiftTable& shifts, const Controls& controls,
                            const RiOptions& opts = {}, std::optional<RiGrid> grid = std::nullopt) {
  const RandomizationDesign design(data, shares, shifts, controls, opts);
  RiResult r;
  r.level = opts.level;
  r.draws = design.draws();
  r.exhaustive = design.exhaustive();
  r.seed = opts.seed;
  r.warnings = design.warnings();
  r.point_estimate = design.point_estimate();
  r.p_at_point = design.p_value(r.point_estimate);
  const double alpha = 1.0 - opts.level;
  if (!(r.p_at_point > alpha)) {
    throw NumericalError("the point estimate itself is rejected at this level; too few draws for the requested level");
  }
  std::optional<double> lo_bound, hi_bound;
  if (grid && std::isfinite(grid->lower)) lo_bound = grid->lower;
  if (grid && std::isfinite(grid->upper)) hi_bound = grid->upper;
  if ((lo_bound && *lo_bound >= r.point_estimate) || (hi_bound && *hi_bound <= r.point_estimate)) {
    throw NumericalError("grid bounds do not bracket the point estimate " + detail::format_double(r.point_estimate) +
                         "; widen the grid bounds");
  }
  const double step = std::max(1e-3, 0.1 * std::abs(r.point_estimate));
  const double lo_out = detail::find_rejection(design, r.point_estimate, -1.0, step, alpha, lo_bound);
  const double hi_out = detail::find_rejection(design, r.point_estimate, 1.0, step, alpha, hi_bound);
  r.ci_lower = detail::bisect_boundary(design, r.point_estimate, lo_out, alpha);
  r.ci_upper = detail::bisect_boundary(design, r.point_estimate, hi_out, alpha);

  const int points = grid ? std::max(2, grid->points) : 21;
  const double g_lo = lo_bound ? *lo_bound : r.ci_lower - 0.5 * (r.ci_upper - r.ci_lower);
  const double g_hi = hi_bound ? *hi_bound : r.ci_upper + 0.5 * (r.ci_upper - r.ci_lower);
  for (int k = 0; k < points; ++k) {
    const double beta = g_lo + (g_hi - g_lo) * k / (points - 1);
    r.beta_grid.push_back(beta);
    r.stat_observed.push_back(design.statistic(beta));
    r.stat_distribution.push_back(design.distribution(beta));
    r.p_values.push_back(design.p_value(beta));
  }
  return r;
}

}  // namespace shiftshare
