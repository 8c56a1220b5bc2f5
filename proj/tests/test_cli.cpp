#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "shiftshare/manifest.hpp"
#include "shiftshare/report.hpp"

namespace fs = std::filesystem;
using namespace shiftshare;
using nlohmann::json;

namespace {

const std::string kFixture = SHIFTSHARE_FIXTURE_DIR;

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("shiftshare_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt";
    const auto err = dir_ / "stderr.txt";
    const std::string cmd = std::string(SHIFTSHARE_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  static std::string inputs(const std::string& dir = kFixture) {
    return "--shares " + dir + "/shares.csv --shifts " + dir + "/shifts.csv --units " + dir + "/units.csv";
  }

  fs::path dir_;
};

}  // namespace

TEST(Report, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Report, NonFiniteBecomesNull) {
  EstimateReport r;
  r.estimator = "ols";
  r.beta_hat = 1.0;
  r.se["conventional_cluster"] = 0.5;
  const auto j = to_json(r);
  EXPECT_TRUE(j["effective_f"].is_null());
  EXPECT_DOUBLE_EQ(j["t_stat"]["conventional_cluster"].get<double>(), 2.0);
  EXPECT_NE(estimate_csv(r).find(",NA,"), std::string::npos);
}

TEST_F(Cli, ShiftFrameworkReportsBothVariants) {
  const auto r = run("estimate --framework shift --quiet " + inputs());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["schema_version"], kReportSchemaVersion);
  const auto& se = j["estimate"]["se"];
  EXPECT_TRUE(se.contains("conventional_cluster"));
  EXPECT_TRUE(se.contains("hc_exposure_robust"));
  EXPECT_TRUE(se.contains("residualized"));
  EXPECT_NEAR(se["hc_exposure_robust"].get<double>(), se["residualized"].get<double>(), 1e-10);
}

TEST_F(Cli, RerunIsByteIdentical) {
  const auto a = (dir_ / "a.json").string();
  const auto b = (dir_ / "b.json").string();
  const std::string cmd = "ri --draws 300 --seed 11 --beta0 0 --quiet " + inputs();
  ASSERT_EQ(run(cmd + " --out " + a).code, 0);
  ASSERT_EQ(run(cmd + " --out " + b).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  auto ma = json::parse(slurp(a + ".manifest.json"));
  auto mb = json::parse(slurp(b + ".manifest.json"));
  EXPECT_EQ(ma["config_digest"], mb["config_digest"]);
  EXPECT_EQ(ma["inputs"], mb["inputs"]);
  EXPECT_EQ(ma["outputs"][a], mb["outputs"][b]);
  EXPECT_EQ(ma["seed"], 11);
}

TEST_F(Cli, ManifestDigestsMatchFiles) {
  const auto out = (dir_ / "est.json").string();
  ASSERT_EQ(run("estimate --quiet --out " + out + " " + inputs()).code, 0);
  const auto m = json::parse(slurp(out + ".manifest.json"));
  EXPECT_EQ(m["inputs"][kFixture + "/shares.csv"], sha256_file(kFixture + "/shares.csv"));
  EXPECT_EQ(m["outputs"][out], sha256_file(out));
  EXPECT_EQ(m["version"], kVersion);
  EXPECT_EQ(m["config"]["command"], "estimate");
  EXPECT_EQ(m["config_digest"], sha256_hex(m["config"].dump()));
}

TEST_F(Cli, InputsAreNotModified) {
  for (const char* f : {"shares.csv", "shifts.csv", "units.csv"}) fs::copy_file(kFixture + "/" + f, dir_ / f);
  const std::string before = slurp(dir_ / "units.csv") + slurp(dir_ / "shifts.csv") + slurp(dir_ / "shares.csv");
  ASSERT_EQ(run("construct --complete-shares --residualize 1 --quiet --out " + (dir_ / "c.csv").string() + " " + inputs(dir_.string())).code, 0);
  EXPECT_EQ(run("estimate --quiet --out " + (dir_ / "units.csv").string() + " " + inputs(dir_.string())).code, 1);
  EXPECT_EQ(slurp(dir_ / "units.csv") + slurp(dir_ / "shifts.csv") + slurp(dir_ / "shares.csv"), before);
}

TEST_F(Cli, ConstructWritesUnitAndShiftTables) {
  const auto out = (dir_ / "c.csv").string();
  ASSERT_EQ(run("construct --complete-shares --residualize \"1 + p_1\" --quiet --out " + out + " " + inputs()).code, 0);
  const auto units = slurp(out);
  EXPECT_EQ(units.substr(0, units.find('\n')), "unit_id,share_sum,exposure,instrument_residualized");
  const auto shifts = slurp(dir_ / "c.shifts.csv");
  EXPECT_NE(shifts.find("__complement__"), std::string::npos);
  EXPECT_NE(shifts.find("eta_hat"), std::string::npos);
}

TEST_F(Cli, MalformedCsvNamesTheCell) {
  for (const char* f : {"shares.csv", "shifts.csv"}) fs::copy_file(kFixture + "/" + f, dir_ / f);
  std::string units = slurp(kFixture + "/units.csv");
  const auto line = units.find("\nu003,");
  const auto comma = units.find(',', line + 1);
  units.replace(comma + 1, units.find(',', comma + 1) - comma - 1, "abc");
  std::ofstream(dir_ / "units.csv") << units;
  const auto r = run("estimate " + inputs(dir_.string()));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("row 4, column 'y'"), std::string::npos) << r.err;
}

TEST_F(Cli, NumericalFailureExitsTwo) {
  const auto r = run("ri --draws 200 --grid-lower 100 --grid-upper 101 " + inputs());
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST_F(Cli, UsageErrorsExit64) {
  EXPECT_EQ(run("estimate --bogus " + inputs()).code, 64);
  EXPECT_EQ(run("").code, 64);
  EXPECT_EQ(run("estimate --framework both " + inputs()).code, 64);
  const auto v = run("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_EQ(v.out, std::string(kVersion) + "\n");
}

TEST_F(Cli, DiagnoseReportAndTables) {
  const auto out = (dir_ / "d.json").string();
  const auto r = run("diagnose --balance placebo --shift-balance p_1 --icc cluster --bootstrap 200 --concentration --cluster cluster "
                     "--tables --quiet --out " + out + " " + inputs());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(slurp(out));
  EXPECT_TRUE(j["balance_unit"]["placebo"].contains("exposure_robust"));
  EXPECT_TRUE(j["balance_shift"].contains("p_1"));
  EXPECT_TRUE(j["shift_summary"]["icc"].contains("cluster"));
  EXPECT_TRUE(j["concentration"]["cluster_level"].get<bool>());
  EXPECT_TRUE(fs::exists(dir_ / "d.balance.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "d.summary.csv"));
}

TEST_F(Cli, SimulateWritesCoverageCsv) {
  std::ofstream(dir_ / "dgp.txt") << "n = 40\nm = 15\nshare_support = 3\n";
  const auto r = run("simulate --config " + (dir_ / "dgp.txt").string() + " --reps 100 --seed 3 --estimators exposure_robust --threads 1");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "estimator,replications,failures,mean_bias,sd_beta,mean_se,coverage,rejection_rate");
  EXPECT_NE(r.out.find("\nexposure_robust,100,"), std::string::npos);
  EXPECT_EQ(run("simulate --reps 10").code, 1);
  EXPECT_EQ(run("simulate --set nonsense=1").code, 1);
}
