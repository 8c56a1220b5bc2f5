#pragma once

// Random problem instances shared by the unit tests and the acceptance suite.

#include <random>

#include "oracles.hpp"
#include "shiftshare/data.hpp"

namespace instances {

using namespace shiftshare;

struct Instance {
  ShareMatrix shares;
  ShiftTable shifts;
  Dataset data;
};

/// n units, m shifts, one shift covariate p_1 and one unit control pi_1.
/// Complete shares unless min_total < 1. X follows a noisy shift-share
/// first stage so the instrument is strong.
inline Instance random_instance(std::mt19937_64& rng, int n, int m, double min_total = 1.0, double sparsity = 0.3) {
  Instance inst;
  inst.shares = ShareMatrix::from_dense(oracle::random_shares(rng, n, m, min_total, sparsity));
  inst.shifts = ShiftTable::from_values(oracle::random_normal(rng, m, 0.3, 1.0));
  inst.shifts.covariate_names = {"p_1"};
  inst.shifts.covariates = Matrix(oracle::random_normal(rng, m));
  Labels clusters;
  for (int j = 0; j < m; ++j) clusters.push_back("c" + std::to_string(j % std::max(2, m / 3)));
  inst.shifts.cluster = clusters;
  const Vector z = inst.shares.apply(inst.shifts.values);
  const Vector pi = oracle::random_normal(rng, n);
  const Vector x = 0.8 * z + 0.3 * pi + oracle::random_normal(rng, n, 0.0, 0.5);
  const Vector y = 1.5 * x - 0.4 * pi + oracle::random_normal(rng, n);
  Matrix ctrl(n, 1);
  ctrl.col(0) = pi;
  inst.data = Dataset::make(inst.shares.row_ids(), y, x, ctrl, {"pi_1"}, oracle::random_weights(rng, n));
  return inst;
}

}  // namespace instances
