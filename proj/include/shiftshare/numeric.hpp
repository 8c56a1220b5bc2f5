#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "shiftshare/error.hpp"

namespace shiftshare {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Relative pivot threshold for every rank decision in the library.
inline constexpr double kRankTolerance = 1e-10;

/// Neumaier-compensated accumulator. Results depend only on the order of
/// the added terms, never on how the caller splits the work.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      carry_ += (sum_ - t) + x;
    } else {
      carry_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  CompensatedSum& operator+=(double x) {
    add(x);
    return *this;
  }
  double value() const { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

inline double compensated_sum(std::span<const double> xs) {
  CompensatedSum acc;
  for (double x : xs) acc += x;
  return acc.value();
}

inline double compensated_sum(const Vector& xs) {
  return compensated_sum(std::span<const double>(xs.data(), static_cast<std::size_t>(xs.size())));
}

// Σ_i w_i a_i b_i with compensation.
inline double weighted_dot(const Vector& w, const Vector& a, const Vector& b) {
  CompensatedSum acc;
  for (Index i = 0; i < w.size(); ++i) acc += w[i] * a[i] * b[i];
  return acc.value();
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

/// Weighted least-squares projector onto the column space of a design.
///
/// Holds a column-pivoted QR of diag(sqrt(w)) * design. A design whose
/// numerical rank (pivot threshold 1e-10 relative to the largest pivot)
/// falls short of its column count is rejected with a NumericalError that
/// names the columns the pivoting pushed past the rank.
class WeightedProjector {
 public:
  WeightedProjector() = default;

  WeightedProjector(const Matrix& design, const Vector& weights,
                    std::vector<std::string> names = {})
      : design_(design), sqrt_w_(weights.array().max(0.0).sqrt().matrix()) {
    if (design.rows() != weights.size()) {
      throw ValidationError("design has " + std::to_string(design.rows()) + " rows but " +
                            std::to_string(weights.size()) + " weights were supplied");
    }
    if (design.cols() == 0) return;
    if (!design.allFinite()) throw ValidationError("design matrix contains non-finite values");
    qr_.setThreshold(kRankTolerance);
    qr_.compute(sqrt_w_.asDiagonal() * design);
    if (qr_.rank() < design.cols()) {
      std::string dropped;
      const auto& perm = qr_.colsPermutation().indices();
      for (Index k = qr_.rank(); k < design.cols(); ++k) {
        const Index col = perm[k];
        if (!dropped.empty()) dropped += ", ";
        dropped += col < static_cast<Index>(names.size()) ? names[static_cast<std::size_t>(col)]
                                                           : "column " + std::to_string(col);
      }
      throw NumericalError("rank-deficient design (rank " + std::to_string(qr_.rank()) + " of " +
                           std::to_string(design.cols()) + "); collinear terms: " + dropped);
    }
  }

  Index cols() const { return design_.cols(); }
  Index rows() const { return design_.rows(); }
  const Matrix& design() const { return design_; }

  Vector coefficients(const Vector& y) const {
    if (design_.cols() == 0) return Vector(0);
    return qr_.solve(sqrt_w_.cwiseProduct(y));
  }

  Vector fitted(const Vector& y) const {
    if (design_.cols() == 0) return Vector::Zero(y.size());
    return design_ * coefficients(y);
  }

  Vector residualize(const Vector& y) const { return y - fitted(y); }

  Matrix residualize(const Matrix& y) const {
    Matrix out(y.rows(), y.cols());
    for (Index k = 0; k < y.cols(); ++k) out.col(k) = residualize(Vector(y.col(k)));
    return out;
  }

  /// (D' W D)^{-1}, for sandwich covariance estimators.
  Matrix bread() const {
    const Index k = design_.cols();
    if (k == 0) return Matrix(0, 0);
    const Matrix r = qr_.matrixR().topLeftCorner(k, k).template triangularView<Eigen::Upper>();
    const Matrix r_inv = r.template triangularView<Eigen::Upper>().solve(Matrix::Identity(k, k));
    const Matrix inner = r_inv * r_inv.transpose();
    const auto& p = qr_.colsPermutation();
    return p * inner * p.transpose();
  }

 private:
  Matrix design_;
  Vector sqrt_w_;
  Eigen::ColPivHouseholderQR<Matrix> qr_;
};

/// SplitMix64 stream keyed by (seed, a, b). Each key gives an independent
/// sequence, so draws can be generated in any order or on any thread.
class RandomStream {
 public:
  using result_type = std::uint64_t;

  explicit RandomStream(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0)
      : state_(mix(mix(mix(seed) ^ (a + 0x632BE59BD9B4E019ULL)) ^ (b + 0x8CB92BA72F3D8DD7ULL))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer on [0, bound) by rejection, bias free.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % bound;
  }

  double normal() {
    // Marsaglia polar method; the spare is discarded to keep streams stateless.
    for (;;) {
      const double u = 2.0 * uniform() - 1.0;
      const double v = 2.0 * uniform() - 1.0;
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

// Fisher-Yates over an index range, driven by a RandomStream.
template <class It>
void shuffle_with(It first, It last, RandomStream& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1), first + static_cast<std::ptrdiff_t>(j));
  }
}

/// Weighted mean Σ w x / Σ w.
inline double weighted_mean(const Vector& x, const Vector& w) {
  const double total = compensated_sum(w);
  if (!(total > 0.0)) throw ValidationError("weights sum to zero");
  return weighted_dot(w, x, Vector::Ones(x.size())) / total;
}

/// Weighted standard deviation sqrt(Σ w (x - mean)^2 / Σ w), no df correction.
inline double weighted_sd(const Vector& x, const Vector& w) {
  const double mean = weighted_mean(x, w);
  const Vector centered = x.array() - mean;
  return std::sqrt(weighted_dot(w, centered, centered) / compensated_sum(w));
}

}  // namespace shiftshare
