#include <gtest/gtest.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

#include "kflow/analysis.hpp"
#include "kflow/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(KFLOW_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string value_of(const std::string& out, const std::string& key) {
  const auto pos = out.find(key + " ");
  if (pos == std::string::npos) return {};
  const auto start = pos + key.size() + 1;
  return out.substr(start, out.find('\n', start) - start);
}

// Trains one tiny CFM and Koopman pair shared by the suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "kflow_cli_tests";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    cfm_ok_ = run("train-cfm --target moons --steps 30 --batch 64 --hidden 32 --out " + p("vf.ck")).code == 0;
    koop_ok_ = cfm_ok_ && run("train-koopman --cfm " + p("vf.ck") +
                              " --steps 20 --batch 64 --consistency-batch 32 --n-uniform 512"
                              " --n-trajectories 64 --p-learned 6 --hidden 32 --out " + p("k.ck"))
                                     .code == 0;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  static std::string p(const std::string& name) { return (dir_ / name).string(); }

  static inline fs::path dir_;
  static inline bool cfm_ok_ = false;
  static inline bool koop_ok_ = false;
};

}  // namespace

TEST_F(Cli, MissingRequiredOptionIsUsageError) {
  EXPECT_EQ(run("train-cfm --out " + p("x.ck")).code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("sample --model " + p("k.ck") + " --out " + p("s.csv") + " --t 0.7,0.2").code, 2);
}

TEST_F(Cli, SingleStepTrainingIsFast) {
  const auto t0 = std::chrono::steady_clock::now();
  const Result r = run("train-cfm --target 8g --steps 1 --out " + p("one.ck"));
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(r.code, 0);
  EXPECT_LT(s, 5.0);
  EXPECT_TRUE(fs::exists(p("one.ck")));
}

TEST_F(Cli, TrainedModelsExist) {
  EXPECT_TRUE(cfm_ok_);
  EXPECT_TRUE(koop_ok_);
}

TEST_F(Cli, SamplingIsDeterministic) {
  ASSERT_TRUE(koop_ok_);
  ASSERT_EQ(run("sample --model " + p("k.ck") + " --n 100 --t 0,0.5,1 --seed 3 --out " + p("a.csv")).code, 0);
  ASSERT_EQ(run("sample --model " + p("k.ck") + " --n 100 --t 0,0.5,1 --seed 3 --out " + p("b.csv")).code, 0);
  const std::string a = kflow::read_file(p("a.csv"));
  EXPECT_EQ(a, kflow::read_file(p("b.csv")));
  EXPECT_EQ(a.substr(0, a.find('\n')), "t,x,y,sample_id");
  EXPECT_EQ(kflow::read_points_csv(p("a.csv")).rows(), 100u);
}

TEST_F(Cli, EvalMmdMatchesLibrary) {
  ASSERT_EQ(run("dataset --dist moons --n 300 --seed 1 --out " + p("m.csv")).code, 0);
  ASSERT_EQ(run("dataset --dist 8g --n 200 --seed 2 --out " + p("g.csv")).code, 0);
  const Result r = run("eval-mmd --a " + p("m.csv") + " --b " + p("g.csv"));
  ASSERT_EQ(r.code, 0);
  const auto lib = kflow::mmd(kflow::read_points_csv(p("m.csv")), kflow::read_points_csv(p("g.csv")));
  EXPECT_EQ(std::stod(value_of(r.out, "mmd2")), lib.value);
  EXPECT_EQ(value_of(r.out, "n_a"), "300");
  EXPECT_EQ(value_of(r.out, "estimator"), "biased");
}

TEST_F(Cli, SpectrumTopRowsSorted) {
  ASSERT_TRUE(koop_ok_);
  ASSERT_EQ(run("spectrum --model " + p("k.ck") + " --top 10 --out " + p("sp.csv")).code, 0);
  const std::string text = kflow::read_file(p("sp.csv"));
  std::vector<double> re;
  std::size_t pos = text.find('\n') + 1;
  while (pos < text.size()) {
    const auto eol = text.find('\n', pos);
    const std::string line = text.substr(pos, eol - pos);
    re.push_back(std::stod(line.substr(line.find(',') + 1)));
    pos = eol + 1;
  }
  ASSERT_EQ(re.size(), 10u);
  EXPECT_TRUE(std::is_sorted(re.rbegin(), re.rend()));
}

TEST_F(Cli, GeneratorOnlyLossSelection) {
  ASSERT_TRUE(cfm_ok_);
  EXPECT_EQ(run("train-koopman --cfm " + p("vf.ck") +
                " --losses generator --steps 5 --batch 32 --n-uniform 256 --p-learned 4 --hidden 16 --out " +
                p("g.ck"))
                .code,
            0);
  EXPECT_EQ(run("train-koopman --cfm " + p("vf.ck") + " --losses bogus --steps 1 --out " + p("h.ck")).code, 2);
}

TEST_F(Cli, CorruptedCheckpointIsIoError) {
  ASSERT_TRUE(koop_ok_);
  std::string bytes = kflow::read_file(p("k.ck"));
  bytes[bytes.size() - 5] ^= 0x20;
  kflow::write_file(p("bad.ck"), bytes);
  EXPECT_EQ(run("sample --model " + p("bad.ck") + " --out " + p("x.csv")).code, 3);
  EXPECT_EQ(run("sample --model " + p("missing.ck") + " --out " + p("x.csv")).code, 3);
}

TEST_F(Cli, ConfigFileSuppliesOptions) {
  kflow::write_file(p("cfg.ini"), "[dataset]\ndist=swissroll\nn=17\nseed=4\n");
  ASSERT_EQ(run("--config " + p("cfg.ini") + " dataset --out " + p("cfg.csv")).code, 0);
  EXPECT_EQ(kflow::read_points_csv(p("cfg.csv")).rows(), 17u);
  ASSERT_EQ(run("--config " + p("cfg.ini") + " dataset --n 5 --out " + p("cfg2.csv")).code, 0);
  EXPECT_EQ(kflow::read_points_csv(p("cfg2.csv")).rows(), 5u);
}

TEST_F(Cli, BenchWritesRows) {
  ASSERT_TRUE(koop_ok_);
  const Result r = run("bench --koopman " + p("k.ck") + " --cfm " + p("vf.ck") +
                       " --n 64 --steps 1,10 --json " + p("bench.json"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("koopman,1,"), std::string::npos);
  EXPECT_NE(r.out.find("euler,10,"), std::string::npos);
  EXPECT_TRUE(fs::exists(p("bench.json")));
}
