#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tacbrac/data_io.hpp"
#include "tacbrac/density.hpp"
#include "tacbrac/error.hpp"
#include "tacbrac/forward_model.hpp"
#include "tacbrac/grid_basis.hpp"
#include "tacbrac/kv_config.hpp"

namespace tacbrac {

/// Piecewise-linear BrAC template through (t_minutes, value) knots; zero
/// outside the knot range.
struct Profile {
  std::vector<Sample> knots = {{0.0, 0.0}, {60.0, 0.08}, {240.0, 0.0}};

  double operator()(double t) const {
    if (knots.empty() || t < knots.front().t || t > knots.back().t) return 0.0;
    if (t == knots.front().t) return knots.front().value;
    for (std::size_t i = 1; i < knots.size(); ++i) {
      if (t <= knots[i].t) {
        const double w = (t - knots[i - 1].t) / (knots[i].t - knots[i - 1].t);
        return (1.0 - w) * knots[i - 1].value + w * knots[i].value;
      }
    }
    return 0.0;
  }

  double end() const { return knots.empty() ? 0.0 : knots.back().t; }

  /// Parses "t:v,t:v,...".
  static Profile parse(const std::string& text) {
    Profile p;
    p.knots.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("profile knot '" + item + "' is not t:v");
      try {
        p.knots.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
      } catch (const std::exception&) {
        throw ConfigError("profile knot '" + item + "' is not numeric");
      }
    }
    if (p.knots.size() < 2) throw ConfigError("profile needs at least two knots");
    for (std::size_t i = 0; i < p.knots.size(); ++i) {
      if (p.knots[i].value < 0.0) throw ConfigError("profile values must be >= 0");
      if (i > 0 && !(p.knots[i].t > p.knots[i - 1].t)) {
        throw ConfigError("profile times must increase");
      }
    }
    return p;
  }
};

enum class SynthMode { population, individual };

struct SynthConfig {
  PopulationParams rho_true;
  Profile profile;
  double noise_sigma = 0.0;
  int n_episodes = 5;
  std::uint64_t seed = 1;
  SynthMode mode = SynthMode::population;
  DiscretizationGrid grid;
  double duration = 0.0;          ///< minutes of record; 0 = profile end + 180
  double brac_cadence = 30.0;     ///< minutes between breath samples
  double tac_cadence = 5.0;       ///< minutes between sensor samples
  double amplitude_jitter = 0.3;  ///< episode peak scaled by U[1 - j, 1 + j]
  double time_jitter = 0.2;       ///< episode time axis stretched by U[1 - j, 1 + j]

  double record_length() const { return duration > 0.0 ? duration : profile.end() + 180.0; }

  void validate() const {
    rho_true.validate();
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
    if (n_episodes < 1) throw ConfigError("n_episodes must be >= 1");
    if (!(brac_cadence > 0.0) || !(tac_cadence > 0.0)) throw ConfigError("cadences must be positive");
    if (amplitude_jitter < 0.0 || amplitude_jitter >= 1.0 || time_jitter < 0.0 ||
        time_jitter >= 1.0) {
      throw ConfigError("jitter values must lie in [0, 1)");
    }
    if (record_length() < tac_cadence) throw ConfigError("record shorter than one TAC sample");
  }

  /// Reads the flat key-value form; the distribution uses the prefix "rho_true.".
  static SynthConfig from_kv(const KeyValue& kv) {
    SynthConfig c;
    c.rho_true = PopulationParams::from_kv(kv, "rho_true.");
    if (kv.has("profile")) c.profile = Profile::parse(kv.get("profile"));
    c.noise_sigma = kv.get_double_or("noise_sigma", c.noise_sigma);
    c.n_episodes = static_cast<int>(kv.get_int_or("n_episodes", c.n_episodes));
    c.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", static_cast<long>(c.seed)));
    const std::string mode = kv.get_or("mode", "population");
    if (mode == "population") {
      c.mode = SynthMode::population;
    } else if (mode == "individual") {
      c.mode = SynthMode::individual;
    } else {
      throw ConfigError("mode must be 'population' or 'individual', got '" + mode + "'");
    }
    c.grid.n = static_cast<int>(kv.get_int_or("grid.n", c.grid.n));
    c.grid.m1 = static_cast<int>(kv.get_int_or("grid.m1", c.grid.m1));
    c.grid.m2 = static_cast<int>(kv.get_int_or("grid.m2", c.grid.m2));
    c.grid.tau = kv.get_double_or("grid.tau", c.grid.tau);
    c.duration = kv.get_double_or("duration", c.duration);
    c.brac_cadence = kv.get_double_or("brac_cadence", c.brac_cadence);
    c.tac_cadence = kv.get_double_or("tac_cadence", c.tac_cadence);
    c.amplitude_jitter = kv.get_double_or("amplitude_jitter", c.amplitude_jitter);
    c.time_jitter = kv.get_double_or("time_jitter", c.time_jitter);
    c.validate();
    return c;
  }
};

/// A generated episode with its ground truth.
struct SynthEpisode {
  Episode episode;
  Eigen::Vector2d q = Eigen::Vector2d::Constant(std::nan(""));  ///< individual mode only
  Eigen::VectorXd u;        ///< zero-order-hold input on the tau grid, u_0..u_{K-1}
  Eigen::VectorXd y_clean;  ///< noiseless model output y_1..y_K
};

/// Independent stream for (seed, stream) pairs.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

/// Generates one episode from an already discretised model.
inline SynthEpisode generate_episode(const SynthConfig& cfg, const DiscreteTimeOps& ops,
                                     std::mt19937_64& rng, const std::string& id) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double amp = 1.0 + cfg.amplitude_jitter * unit(rng);
  const double stretch = 1.0 + cfg.time_jitter * unit(rng);
  const double length = cfg.record_length();

  SynthEpisode out;
  out.episode.id = id;
  for (double t = 0.0; t <= length + 1e-9; t += cfg.brac_cadence) {
    out.episode.brac.push_back({t, amp * cfg.profile(t / stretch)});
  }
  const double tau = cfg.grid.tau;
  const int steps = static_cast<int>(std::floor(length / tau + 1e-9));
  // Drive the model with the same resampled input the fitting code will see.
  out.u = resample(out.episode.brac, tau, 0.0, steps);
  out.y_clean = simulate(ops, out.u);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (double t = 0.0; t <= length + 1e-9; t += cfg.tac_cadence) {
    const int k = static_cast<int>(std::lround(t / tau));
    const double clean = k == 0 ? 0.0 : out.y_clean(k - 1);
    const double e = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * noise(rng) : 0.0;
    out.episode.tac.push_back({t, std::max(0.0, clean + e)});
  }
  return out;
}

/// Synthetic training data: population mode draws TAC from the population
/// model at rho_true, individual mode from the deterministic model at a
/// per-episode q drawn from rho_true. Episode i uses stream i of the seed.
inline std::vector<SynthEpisode> generate(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<SynthEpisode> out;
  out.reserve(cfg.n_episodes);
  std::optional<DiscreteTimeOps> population;
  if (cfg.mode == SynthMode::population) population.emplace(assemble(cfg.rho_true, cfg.grid));
  for (int i = 0; i < cfg.n_episodes; ++i) {
    std::mt19937_64 rng = derived_rng(cfg.seed, static_cast<std::uint64_t>(i));
    const std::string id = "episode_" + std::to_string(i + 1);
    if (cfg.mode == SynthMode::population) {
      out.push_back(generate_episode(cfg, *population, rng, id));
    } else {
      const Eigen::Vector2d q = sample(cfg.rho_true, 1, rng())[0];
      const DiscreteTimeOps ops(deterministic_system(q(0), q(1), cfg.grid.n, cfg.grid.model_step()));
      SynthEpisode ep = generate_episode(cfg, ops, rng, id);
      ep.q = q;
      out.push_back(std::move(ep));
    }
  }
  return out;
}

}  // namespace tacbrac
