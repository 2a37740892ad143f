#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "tacbrac/population_fit.hpp"
#include "tacbrac/synth.hpp"

using namespace tacbrac;

namespace {

SynthConfig base_config() {
  SynthConfig cfg;
  cfg.rho_true.a.setZero();
  cfg.rho_true.b << 1.4942, 2.0409;
  cfg.rho_true.mu << 0.6245, 1.0274;
  cfg.rho_true.sigma << 0.0259, 0.0067, 0.0067, 0.1227;
  return cfg;
}

}  // namespace

TEST(Profile, PiecewiseLinearTemplate) {
  const Profile p;
  EXPECT_DOUBLE_EQ(p(0.0), 0.0);
  EXPECT_DOUBLE_EQ(p(30.0), 0.04);
  EXPECT_DOUBLE_EQ(p(60.0), 0.08);
  EXPECT_DOUBLE_EQ(p(150.0), 0.04);
  EXPECT_DOUBLE_EQ(p(300.0), 0.0);
  EXPECT_DOUBLE_EQ(p(-5.0), 0.0);
  const Profile q = Profile::parse("0:0,30:0.1,90:0");
  EXPECT_DOUBLE_EQ(q(45.0), 0.075);
  EXPECT_THROW(Profile::parse("0:0"), ConfigError);
  EXPECT_THROW(Profile::parse("0:0,0:1"), ConfigError);
  EXPECT_THROW(Profile::parse("0:0,10:-1"), ConfigError);
  EXPECT_THROW(Profile::parse("0-0,10:1"), ConfigError);
}

TEST(Config, Validation) {
  SynthConfig cfg = base_config();
  cfg.noise_sigma = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = base_config();
  cfg.n_episodes = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = base_config();
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, FromKeyValue) {
  std::istringstream in(
      "rho_true.a1 = 0\nrho_true.a2 = 0\nrho_true.b1 = 1.5\nrho_true.b2 = 2\n"
      "rho_true.mu1 = 0.6\nrho_true.mu2 = 1\nrho_true.s11 = 0.02\n"
      "rho_true.s12 = 0\nrho_true.s22 = 0.1\nn_episodes = 3\nseed = 9\n"
      "mode = individual\nnoise_sigma = 0.001\n");
  const SynthConfig cfg = SynthConfig::from_kv(KeyValue::parse(in));
  EXPECT_EQ(cfg.n_episodes, 3);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.mode, SynthMode::individual);
  EXPECT_DOUBLE_EQ(cfg.rho_true.mu(0), 0.6);
  EXPECT_DOUBLE_EQ(cfg.noise_sigma, 0.001);

  std::istringstream missing("rho_true.b1 = 1.5\n");
  try {
    SynthConfig::from_kv(KeyValue::parse(missing));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rho_true."), std::string::npos);
  }
}

TEST(Generate, NoiselessPopulationTacEqualsSimulation) {
  SynthConfig cfg = base_config();
  cfg.n_episodes = 3;
  const auto eps = generate(cfg);
  const DiscreteTimeOps ops(assemble(cfg.rho_true, cfg.grid));
  for (const auto& e : eps) {
    const Eigen::VectorXd y = simulate(ops, e.u);
    for (const auto& s : e.episode.tac) {
      const int k = static_cast<int>(std::lround(s.t));
      EXPECT_EQ(s.value, k == 0 ? 0.0 : std::max(0.0, y(k - 1)));
    }
    EXPECT_EQ(e.episode.brac.size(), 15u);
    EXPECT_EQ(e.episode.tac.size(), 85u);
  }
}

TEST(Generate, SeedDeterminism) {
  SynthConfig cfg = base_config();
  cfg.noise_sigma = 0.002;
  cfg.mode = SynthMode::individual;
  const auto a = generate(cfg);
  const auto b = generate(cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].q, b[i].q);
    for (std::size_t j = 0; j < a[i].episode.tac.size(); ++j) {
      EXPECT_EQ(a[i].episode.tac[j].value, b[i].episode.tac[j].value);
    }
  }
  cfg.seed = 2;
  EXPECT_NE(generate(cfg)[0].q, a[0].q);
}

TEST(Generate, IndividualModeRoundTrip) {
  SynthConfig cfg = base_config();
  cfg.mode = SynthMode::individual;
  cfg.n_episodes = 4;
  cfg.seed = 3;
  for (const auto& e : generate(cfg)) {
    const DeterministicFit f =
        fit_episode_deterministic(to_grid(e.episode, cfg.grid.tau), cfg.grid);
    EXPECT_NEAR(f.q(0), e.q(0), 0.05 * e.q(0));
    EXPECT_NEAR(f.q(1), e.q(1), 0.05 * e.q(1));
  }
}

TEST(Generate, NoiseStatistics) {
  SynthConfig cfg = base_config();
  cfg.noise_sigma = 0.004;
  cfg.n_episodes = 40;
  cfg.profile = Profile::parse("0:0,60:0.2,240:0.1,400:0.15");
  double sum = 0.0, sq = 0.0;
  int count = 0;
  for (const auto& e : generate(cfg)) {
    for (const auto& s : e.episode.tac) {
      EXPECT_GE(s.value, 0.0);
      const int k = static_cast<int>(std::lround(s.t));
      if (k == 0) continue;
      const double clean = e.y_clean(k - 1);
      // Samples far from zero are never clamped.
      if (clean < 6.0 * cfg.noise_sigma) continue;
      const double r = s.value - clean;
      sum += r;
      sq += r * r;
      ++count;
    }
  }
  ASSERT_GT(count, 1000);
  const double mean = sum / count;
  const double sd = std::sqrt(sq / count - mean * mean);
  EXPECT_NEAR(sd, cfg.noise_sigma, 0.1 * cfg.noise_sigma);
}

TEST(Generate, EpisodeStreamsIndependentOfCount) {
  SynthConfig cfg = base_config();
  cfg.noise_sigma = 0.001;
  cfg.n_episodes = 2;
  const auto few = generate(cfg);
  cfg.n_episodes = 5;
  const auto many = generate(cfg);
  for (std::size_t j = 0; j < few[1].episode.tac.size(); ++j) {
    EXPECT_EQ(few[1].episode.tac[j].value, many[1].episode.tac[j].value);
  }
}
