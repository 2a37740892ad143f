#include <gtest/gtest.h>
#include <json.hpp>

#include <Eigen/Dense>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "tacbrac/data_io.hpp"
#include "tacbrac/uncertainty.hpp"

namespace fs = std::filesystem;
using namespace tacbrac;

namespace {

const char* kRhoKeys =
    "a1 = 0\na2 = 0\nb1 = 1.4942\nb2 = 2.0409\nmu1 = 0.6245\nmu2 = 1.0274\n"
    "s11 = 0.0259\ns12 = 0.0067\ns22 = 0.1227\n";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("tacbrac_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
  }

  std::string read(const std::string& name) const {
    std::ifstream in(path(name));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  /// Runs the CLI in the scratch directory; stdout and stderr go to files.
  int run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && '" + TACBRAC_CLI + "' " + args +
                            " > stdout.txt 2> stderr.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  void write_sim_config(int episodes, std::uint64_t seed = 7) const {
    std::string text;
    std::istringstream keys(kRhoKeys);
    for (std::string line; std::getline(keys, line);) text += "rho_true." + line + "\n";
    text += "n_episodes = " + std::to_string(episodes) + "\nseed = " + std::to_string(seed) + "\n";
    write("sim.cfg", text);
  }

  void simulate(int episodes) const {
    write_sim_config(episodes);
    ASSERT_EQ(run("simulate sim.cfg --out data"), 0) << read("stderr.txt");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SimulateWritesEpisodesAndManifest) {
  simulate(3);
  const auto manifest = nlohmann::json::parse(read("data/manifest.json"));
  ASSERT_EQ(manifest["episodes"].size(), 3u);
  for (const auto& e : manifest["episodes"]) {
    EXPECT_TRUE(fs::exists(path("data") / e["file"].get<std::string>()));
    EXPECT_TRUE(fs::exists(path("data") / e["truth_file"].get<std::string>()));
  }
  EXPECT_EQ(manifest["seed"], 7);
}

TEST_F(Cli, SimulateMissingKeyIsNamed) {
  write("bad.cfg", "rho_true.mu1 = 0.6\nn_episodes = 2\n");
  EXPECT_EQ(run("simulate bad.cfg --out data"), 2);
  EXPECT_NE(read("stderr.txt").find("rho_true."), std::string::npos);
}

TEST_F(Cli, SimulateIsByteIdenticalForSeed) {
  write_sim_config(2);
  ASSERT_EQ(run("simulate sim.cfg --out a"), 0);
  ASSERT_EQ(run("simulate sim.cfg --out b"), 0);
  for (const char* f : {"episode_1.csv", "episode_2_truth.csv", "manifest.json"}) {
    EXPECT_EQ(read(std::string("a/") + f), read(std::string("b/") + f)) << f;
  }
  ASSERT_EQ(run("simulate sim.cfg --out c --seed 8"), 0);
  EXPECT_NE(read("a/episode_1.csv"), read("c/episode_1.csv"));
  EXPECT_EQ(nlohmann::json::parse(read("c/manifest.json"))["seed"], 8);
}

TEST_F(Cli, FitWritesParametersAndLog) {
  simulate(3);
  ASSERT_EQ(run("fit data/episode_1.csv data/episode_2.csv data/episode_3.csv --out rho.txt "
                "--log fit.jsonl"),
            0)
      << read("stderr.txt");
  const PopulationParams rho = PopulationParams::load(path("rho.txt").string());
  EXPECT_NO_THROW(rho.validate());
  std::istringstream log(read("fit.jsonl"));
  int lines = 0;
  nlohmann::json last;
  for (std::string line; std::getline(log, line); ++lines) last = nlohmann::json::parse(line);
  EXPECT_GE(lines, 2);
  EXPECT_TRUE(last["done"].get<bool>());
  EXPECT_TRUE(last["converged"].get<bool>());
}

TEST_F(Cli, FitRejectsEpisodeWithoutBrac) {
  write("tac.csv", "t_minutes,channel,value\n0,tac,0\n5,tac,0.01\n10,tac,0.02\n");
  EXPECT_EQ(run("fit tac.csv"), 2);
  EXPECT_NE(read("stderr.txt").find("no BrAC"), std::string::npos);
}

TEST_F(Cli, FitNonConvergenceStillWritesBestIterate) {
  simulate(2);
  EXPECT_EQ(run("fit data/episode_1.csv data/episode_2.csv --max-iter 1 --out rho.txt"), 3);
  EXPECT_NO_THROW(PopulationParams::load(path("rho.txt").string()).validate());
}

TEST_F(Cli, DeconvolveWritesResultAndStats) {
  simulate(1);
  write("rho.txt", kRhoKeys);
  ASSERT_EQ(run("deconvolve data/episode_1.csv --rho rho.txt --out res.csv --stats-out st.csv"), 0)
      << read("stderr.txt");
  std::istringstream in(read("res.csv"));
  const auto cols = read_columns(in);
  for (const char* c :
       {"t_minutes", "mean_brac", "lower_band", "upper_band", "fitted_tac", "measured_tac"}) {
    ASSERT_EQ(cols.count(c), 1u) << c;
  }
  const Eigen::VectorXd& mean = cols.at("mean_brac");
  EXPECT_TRUE((cols.at("lower_band").array() <= cols.at("upper_band").array()).all());
  EXPECT_GE(mean.minCoeff(), 0.0);
  const GridEpisode g = to_grid(parse_episode(path("data/episode_1.csv").string()));
  EXPECT_EQ(mean.size(), g.steps() + 1);
  EXPECT_EQ(cols.at("measured_tac").tail(g.steps()), g.y);
  const std::string stats = read("st.csv");
  EXPECT_EQ(stats.rfind("episode,I_measured", 0), 0u);
  EXPECT_NE(stats.find("episode_1,"), std::string::npos);

  ASSERT_EQ(run("deconvolve data/episode_1.csv --rho rho.txt --out res2.csv"), 0);
  EXPECT_EQ(read("res.csv"), read("res2.csv"));
}

TEST_F(Cli, DeconvolveAutoRegNeedsTraining) {
  simulate(1);
  write("rho.txt", kRhoKeys);
  EXPECT_EQ(run("deconvolve data/episode_1.csv --rho rho.txt --auto-reg"), 2);
  EXPECT_EQ(run("deconvolve data/episode_1.csv --rho rho.txt --variant both"), 2);
}

TEST_F(Cli, DeconvolveAcceptsTacOnlyFileAndConfig) {
  write("tac.csv",
        "t_minutes,channel,value\n0,tac,0\n30,tac,0.01\n60,tac,0.03\n90,tac,0.02\n120,tac,0.005\n"
        "150,tac,0\n");
  write("rho.txt", kRhoKeys);
  write("dec.cfg", "rho = rho.txt\nvariant = scalar\nn_samples = 40\nr2 = 0.01\n");
  ASSERT_EQ(run("deconvolve tac.csv --config dec.cfg --out res.csv"), 0) << read("stderr.txt");
  const auto summary = nlohmann::json::parse(read("stdout.txt"));
  EXPECT_EQ(summary["variant"], "scalar");
  EXPECT_EQ(summary["r2"], 0.01);
  ASSERT_EQ(run("deconvolve tac.csv --config dec.cfg --r2 0.1 --out res.csv"), 0);
  EXPECT_EQ(nlohmann::json::parse(read("stdout.txt"))["r2"], 0.1);
}

TEST_F(Cli, StatsMatchesLibraryOnTriangle) {
  std::string csv = "t_minutes,brac\n";
  Eigen::VectorXd c(121);
  for (int j = 0; j <= 120; ++j) {
    c(j) = j <= 60 ? 0.08 * j / 60.0 : 0.08 * (120 - j) / 60.0;
    csv += std::to_string(j) + "," + detail::format_full(c(j)) + "\n";
  }
  write("tri.csv", csv);
  ASSERT_EQ(run("stats tri.csv --out s.csv"), 0) << read("stderr.txt");
  std::istringstream in(read("s.csv"));
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  const EpisodeStats s = episode_stats(c);
  std::string expected = "tri";
  for (int i = 0; i < EpisodeStats::kCount; ++i) expected += "," + detail::format_full(s.value(i));
  EXPECT_EQ(row, expected);
}

TEST_F(Cli, StatsZeroCurveAndMissingFile) {
  write("zero.csv", "t_minutes,brac\n0,0\n1,0\n2,0\n");
  ASSERT_EQ(run("stats zero.csv"), 0);
  EXPECT_NE(read("stdout.txt").find("zero,0,0,0,n/a,n/a"), std::string::npos);
  EXPECT_EQ(run("stats missing.csv"), 2);
  EXPECT_EQ(run("stats"), 2);
}
