#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "oracles.hpp"
#include "shiftshare/data.hpp"
#include "shiftshare/io.hpp"

namespace fs = std::filesystem;
using namespace shiftshare;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("shiftshare_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path / name) << text;
    return path / name;
  }
};

InputPaths toy_inputs(const TempDir& dir, const std::string& shares) {
  return {dir.write("shares.csv", shares),
          dir.write("shifts.csv", "shift_id,value,cluster,p_1\ns1,0.5,a,1\ns2,-1.25,b,2\n"),
          dir.write("units.csv", "unit_id,y,x,w_e,pi_1,region\nu1,1,2,1,0.1,north\nu2,2,3,2,0.2,south\nu3,3,5,1,0.4,north\n")};
}

const char* kToyShares = "unit_id,shift_id,weight\nu1,s1,0.5\nu1,s2,0.5\nu2,s1,0.2\nu2,s2,0.3\nu3,s2,1\n";

}  // namespace

TEST(Data, LoadsToyFixture) {
  TempDir dir;
  const auto data = load_csv(toy_inputs(dir, kToyShares));
  ASSERT_EQ(data.shares.rows(), 3);
  ASSERT_EQ(data.shares.cols(), 2);
  EXPECT_DOUBLE_EQ(data.shares(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(data.shares(1, 1), 0.3);
  EXPECT_DOUBLE_EQ(data.shares(2, 0), 0.0);
  EXPECT_DOUBLE_EQ(data.shares(2, 1), 1.0);
  EXPECT_EQ(data.shifts.cluster->at(1), "b");
  EXPECT_EQ(data.shifts.covariate_names, Labels{"p_1"});
  EXPECT_EQ(data.dataset.control_names, Labels{"pi_1"});
  EXPECT_NEAR(data.dataset.unit_weights.sum(), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(data.dataset.unit_weights[1], 0.5);
  EXPECT_EQ(data.dataset.label("region")[2], "north");
}

TEST(Data, NegativeShareCitesCell) {
  TempDir dir;
  try {
    load_csv(toy_inputs(dir, "unit_id,shift_id,weight\nu1,s1,-0.1\n"));
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("u1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("s1"), std::string::npos) << msg;
  }
}

TEST(Data, RowSumAboveOneRejectedOnThatRow) {
  Matrix w(3, 2);
  w << 0.2, 0.2, 0.5, 0.5, 0.6, 0.6;
  try {
    ShareMatrix::from_dense(w);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("u2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1.2"), std::string::npos) << msg;
  }
}

TEST(Data, RowSumWithinToleranceAccepted) {
  Matrix w(1, 2);
  w << 0.5, 0.5 + 5e-10;
  EXPECT_NO_THROW(ShareMatrix::from_dense(w));
}

TEST(Data, ZeroRowsRetainedWithWarning) {
  TempDir dir;
  const auto data = load_csv(toy_inputs(dir, "unit_id,shift_id,weight\nu1,s1,0.5\nu2,s2,0.3\n"));
  ASSERT_EQ(data.warnings.size(), 1u);
  EXPECT_NE(data.warnings[0].find("u3"), std::string::npos);
  EXPECT_EQ(data.shares.zero_rows(), std::vector<Index>{2});
}

TEST(Data, MissingColumnNamed) {
  TempDir dir;
  auto paths = toy_inputs(dir, kToyShares);
  paths.shifts = dir.write("bad_shifts.csv", "shift_id,cluster\ns1,a\ns2,b\n");
  try {
    load_csv(paths);
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("'value'"), std::string::npos);
  }
}

TEST(Data, NanShiftRejected) {
  TempDir dir;
  auto paths = toy_inputs(dir, kToyShares);
  paths.shifts = dir.write("nan_shifts.csv", "shift_id,value\ns1,NA\ns2,1\n");
  EXPECT_THROW(load_csv(paths), ValidationError);
}

TEST(Data, UnknownIdsReported) {
  TempDir dir;
  try {
    load_csv(toy_inputs(dir, "unit_id,shift_id,weight\nu9,s1,0.5\nu1,s7,0.1\n"));
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'u9'"), std::string::npos);
    EXPECT_NE(msg.find("'s7'"), std::string::npos);
  }
}

TEST(Data, MalformedNumberCitesRowAndColumn) {
  TempDir dir;
  auto paths = toy_inputs(dir, kToyShares);
  paths.units = dir.write("bad_units.csv", "unit_id,y\nu1,1\nu2,abc\nu3,3\n");
  try {
    load_csv(paths);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'y'"), std::string::npos) << msg;
  }
}

TEST(Data, RoundTripIsBitIdentical) {
  std::mt19937_64 rng(11);
  const int n = 17, m = 9;
  const Matrix w = oracle::random_shares(rng, n, m, 0.6, 0.3);
  LoadedData data;
  data.shares = ShareMatrix::from_dense(w);
  data.shifts = ShiftTable::from_values(oracle::random_normal(rng, m, 0.1, 3.0));
  data.shifts.cluster = Labels(static_cast<std::size_t>(m), "c");
  data.shifts.covariate_names = {"p_1"};
  data.shifts.covariates = Matrix(oracle::random_normal(rng, m));
  Matrix ctrl(n, 1);
  ctrl.col(0) = oracle::random_normal(rng, n);
  data.dataset = Dataset::make(data.shares.row_ids(), oracle::random_normal(rng, n), oracle::random_normal(rng, n), ctrl,
                               {"pi_1"}, oracle::random_weights(rng, n));
  for (auto format : {Format::csv, Format::json}) {
    TempDir dir;
    const std::string ext = format == Format::csv ? ".csv" : ".json";
    const InputPaths paths{dir.path / ("shares" + ext), dir.path / ("shifts" + ext), dir.path / ("units" + ext)};
    save(data, paths, format);
    const auto back = load(paths, format);
    ASSERT_EQ(back.shares.rows(), n);
    EXPECT_TRUE((back.shares.dense().array() == data.shares.dense().array()).all());
    EXPECT_TRUE((back.shifts.values.array() == data.shifts.values.array()).all());
    EXPECT_TRUE((back.shifts.covariates.array() == data.shifts.covariates.array()).all());
    EXPECT_TRUE((back.dataset.outcome.array() == data.dataset.outcome.array()).all());
    EXPECT_TRUE((back.dataset.regressor->array() == data.dataset.regressor->array()).all());
    EXPECT_TRUE((back.dataset.controls.array() == data.dataset.controls.array()).all());
    EXPECT_TRUE((back.dataset.raw_weights.array() == data.dataset.raw_weights.array()).all());
    EXPECT_TRUE((back.dataset.unit_weights.array() == data.dataset.unit_weights.array()).all());
    // A second pass writes the same bytes.
    TempDir dir2;
    const InputPaths paths2{dir2.path / ("shares" + ext), dir2.path / ("shifts" + ext), dir2.path / ("units" + ext)};
    save(back, paths2, format);
    EXPECT_EQ(detail::read_file(paths.shares), detail::read_file(paths2.shares));
    EXPECT_EQ(detail::read_file(paths.units), detail::read_file(paths2.units));
  }
}

TEST(LongForm, TwoPeriodBlockStructure) {
  Matrix w(1, 2);
  w << 0.5, 0.5;
  const auto s = ShareMatrix::from_dense(w);
  const auto d = ShiftTable::from_values(Vector::Ones(2));
  const auto lf = to_long_form({s, s}, {d, d}, {"t1", "t2"});
  ASSERT_EQ(lf.shares.rows(), 2);
  ASSERT_EQ(lf.shares.cols(), 4);
  Matrix expected(2, 4);
  expected << 0.5, 0.5, 0, 0, 0, 0, 0.5, 0.5;
  EXPECT_TRUE((lf.shares.dense().array() == expected.array()).all());
  EXPECT_EQ(lf.index.unit_period[1], (std::pair<Index, Index>{0, 1}));
}

TEST(LongForm, SinglePeriodIsIdentity) {
  std::mt19937_64 rng(3);
  const auto s = ShareMatrix::from_dense(oracle::random_shares(rng, 4, 3, 0.5));
  const auto d = ShiftTable::from_values(oracle::random_normal(rng, 3));
  const auto lf = to_long_form({s}, {d});
  EXPECT_TRUE((lf.shares.dense().array() == s.dense().array()).all());
  EXPECT_EQ(lf.shares.row_ids(), s.row_ids());
  EXPECT_TRUE((lf.shifts.values.array() == d.values.array()).all());
}

TEST(LongForm, OffBlockEntriesExactlyZero) {
  std::mt19937_64 rng(5);
  const int n = 2, m = 2, T = 3;
  std::vector<ShareMatrix> shares;
  std::vector<ShiftTable> shifts;
  for (int t = 0; t < T; ++t) {
    shares.push_back(ShareMatrix::from_dense(oracle::random_shares(rng, n, m, 0.3)));
    shifts.push_back(ShiftTable::from_values(oracle::random_normal(rng, m)));
  }
  const auto lf = to_long_form(shares, shifts);
  const Matrix dense = lf.shares.dense();
  for (int r = 0; r < n * T; ++r) {
    for (int c = 0; c < m * T; ++c) {
      const int rt = r / n, ct = c / m;
      if (rt != ct) {
        EXPECT_EQ(dense(r, c), 0.0);
      } else {
        EXPECT_EQ(dense(r, c), shares[static_cast<std::size_t>(rt)](r % n, c % m));
      }
    }
  }
  const Vector long_sums = lf.shares.row_sums();
  for (int r = 0; r < n * T; ++r) EXPECT_EQ(long_sums[r], shares[static_cast<std::size_t>(r / n)].row_sums()[r % n]);
}

TEST(LongForm, InconsistentDimensionsRejected) {
  const auto a = ShareMatrix::from_dense(Matrix::Constant(2, 2, 0.25));
  const auto b = ShareMatrix::from_dense(Matrix::Constant(2, 3, 0.25));
  EXPECT_THROW(to_long_form({a, b}, {ShiftTable::from_values(Vector::Ones(2)), ShiftTable::from_values(Vector::Ones(3))}),
               ValidationError);
}
