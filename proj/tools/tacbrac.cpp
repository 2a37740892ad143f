#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tacbrac/tacbrac.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace tacbrac;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNonConvergence = 3;

// Values missing on the command line are taken from the config file.
void from_config(const CLI::Option* opt, const KeyValue& kv, const std::string& key, double& v) {
  if (opt->count() == 0 && kv.has(key)) v = kv.get_double(key);
}

void from_config(const CLI::Option* opt, const KeyValue& kv, const std::string& key, int& v) {
  if (opt->count() == 0 && kv.has(key)) v = static_cast<int>(kv.get_int_or(key, v));
}

void from_config(const CLI::Option* opt, const KeyValue& kv, const std::string& key,
                 std::uint64_t& v) {
  if (opt->count() == 0 && kv.has(key)) v = static_cast<std::uint64_t>(kv.get_int_or(key, 0));
}

void from_config(const CLI::Option* opt, const KeyValue& kv, const std::string& key,
                 std::string& v) {
  if (opt->count() == 0 && kv.has(key)) v = kv.get(key);
}

void from_config(const CLI::Option* opt, const KeyValue& kv, const std::string& key, bool& v) {
  if (opt->count() == 0 && kv.has(key)) v = kv.get(key) == "true" || kv.get(key) == "1";
}

KeyValue load_config(const std::string& path) { return path.empty() ? KeyValue{} : KeyValue::load(path); }

/// Grid flags shared by fit and deconvolve: --grid n,m1,m2 plus --tau and --m.
struct GridFlags {
  std::string levels = "4,4,4";
  double tau = 1.0;
  int m = 0;
  CLI::Option* levels_opt = nullptr;
  CLI::Option* tau_opt = nullptr;
  CLI::Option* m_opt = nullptr;

  void add(CLI::App& app) {
    levels_opt = app.add_option("--grid", levels, "Spatial and parameter levels n,m1,m2");
    tau_opt = app.add_option("--tau", tau, "Sampling interval in minutes");
    m_opt = app.add_option("--m", m, "Temporal basis count (0 = six per hour of data)");
  }

  DiscretizationGrid resolve(const KeyValue& kv) {
    from_config(levels_opt, kv, "grid", levels);
    from_config(tau_opt, kv, "grid.tau", tau);
    from_config(m_opt, kv, "grid.m", m);
    DiscretizationGrid g;
    std::vector<int> v;
    std::stringstream ss(levels);
    std::string part;
    while (std::getline(ss, part, ',')) {
      try {
        v.push_back(std::stoi(part));
      } catch (const std::exception&) {
        throw ConfigError("--grid expects n,m1,m2, got '" + levels + "'");
      }
    }
    if (v.size() != 3 || v[0] < 1 || v[1] < 1 || v[2] < 1) {
      throw ConfigError("--grid expects three positive integers n,m1,m2, got '" + levels + "'");
    }
    if (!(tau > 0.0)) throw ConfigError("--tau must be positive");
    if (m < 0) throw ConfigError("--m must be >= 0");
    g.n = v[0];
    g.m1 = v[1];
    g.m2 = v[2];
    g.tau = tau;
    g.m = m;
    return g;
  }
};

std::vector<GridEpisode> load_training(const std::vector<std::string>& paths, double tau) {
  std::vector<GridEpisode> out;
  for (const auto& p : paths) {
    const Episode ep = parse_episode(p);
    require_training(ep);
    out.push_back(to_grid(ep, tau));
  }
  return out;
}

/// Curves on t_k = origin + k tau, k = 0..K: inputs are held over the last
/// interval and outputs start from the zero initial state.
Eigen::VectorXd input_rows(const Eigen::VectorXd& u) {
  Eigen::VectorXd out(u.size() + 1);
  out.head(u.size()) = u;
  out(u.size()) = u.size() > 0 ? u(u.size() - 1) : 0.0;
  return out;
}

Eigen::VectorXd output_rows(double y0, const Eigen::VectorXd& y) {
  Eigen::VectorXd out(y.size() + 1);
  out(0) = y0;
  out.tail(y.size()) = y;
  return out;
}

Eigen::VectorXd time_rows(double origin, double tau, Eigen::Index steps) {
  Eigen::VectorXd t(steps + 1);
  for (Eigen::Index k = 0; k <= steps; ++k) t(k) = origin + static_cast<double>(k) * tau;
  return t;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;
  int n_episodes = 0;
  double noise_sigma = 0.0;
  std::string mode;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* n_opt = nullptr;
  CLI::Option* noise_opt = nullptr;
  CLI::Option* mode_opt = nullptr;
};

int run_simulate(const SimulateArgs& a) {
  KeyValue kv = KeyValue::load(a.config);
  if (a.seed_opt->count()) kv.set("seed", std::to_string(a.seed));
  if (a.n_opt->count()) kv.set("n_episodes", std::to_string(a.n_episodes));
  if (a.noise_opt->count()) kv.set("noise_sigma", a.noise_sigma);
  if (a.mode_opt->count()) kv.set("mode", a.mode);
  const SynthConfig cfg = SynthConfig::from_kv(kv);
  fs::create_directories(a.out);

  json manifest;
  manifest["seed"] = cfg.seed;
  manifest["mode"] = cfg.mode == SynthMode::population ? "population" : "individual";
  manifest["n_episodes"] = cfg.n_episodes;
  manifest["noise_sigma"] = cfg.noise_sigma;
  manifest["grid"] = {{"n", cfg.grid.n}, {"m1", cfg.grid.m1}, {"m2", cfg.grid.m2}, {"tau", cfg.grid.tau}};
  manifest["episodes"] = json::array();
  for (const auto& e : generate(cfg)) {
    const std::string file = e.episode.id + ".csv";
    const std::string truth = e.episode.id + "_truth.csv";
    write_episode((fs::path(a.out) / file).string(), e.episode);
    const double origin = e.episode.origin();
    write_columns((fs::path(a.out) / truth).string(), {"t_minutes", "brac_input", "tac_clean"},
                  {time_rows(origin, cfg.grid.tau, e.u.size()), input_rows(e.u),
                   output_rows(0.0, e.y_clean)});
    json entry = {{"id", e.episode.id}, {"file", file}, {"truth_file", truth}};
    if (cfg.mode == SynthMode::individual) entry["q"] = {e.q(0), e.q(1)};
    manifest["episodes"].push_back(entry);
  }
  std::ofstream out(fs::path(a.out) / "manifest.json");
  if (!out) throw ConfigError("cannot write manifest in '" + a.out + "'");
  out << manifest.dump(2) << '\n';
  std::cout << "wrote " << cfg.n_episodes << " episodes to " << a.out << '\n';
  return kExitOk;
}

// --------------------------------------------------------------------- fit

struct FitArgs {
  std::vector<std::string> episodes;
  std::string config;
  GridFlags grid;
  std::string out = "rho.txt";
  std::string log = "fit_log.jsonl";
  std::string init;
  int max_iter = 500;
  double gtol = 1e-6;
  int threads = 0;
  CLI::Option* max_iter_opt = nullptr;
  CLI::Option* gtol_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

int run_fit(FitArgs& a) {
  const KeyValue kv = load_config(a.config);
  const DiscretizationGrid grid = a.grid.resolve(kv);
  from_config(a.max_iter_opt, kv, "max_iter", a.max_iter);
  from_config(a.gtol_opt, kv, "gtol", a.gtol);
  from_config(a.threads_opt, kv, "threads", a.threads);
  const std::vector<GridEpisode> training = load_training(a.episodes, grid.tau);

  std::ofstream log(a.log);
  if (!log) throw ConfigError("cannot write '" + a.log + "'");
  FitOptions opt;
  opt.max_iter = a.max_iter;
  opt.gtol = a.gtol;
  opt.threads = static_cast<unsigned>(std::max(a.threads, 0));
  opt.log = [&log](const optim::BfgsIteration& it) {
    log << json{{"iteration", it.iteration},
                {"cost", it.f},
                {"projected_gradient_norm", it.projected_gradient_norm},
                {"step", it.step}}
               .dump()
        << '\n';
    log.flush();
  };
  const FitResult r = a.init.empty()
                          ? fit_population(training, grid, opt)
                          : fit_population(training, grid, PopulationParams::load(a.init), opt);
  r.rho_star.save(a.out);
  log << json{{"done", true},
              {"converged", r.converged},
              {"iterations", r.iterations},
              {"initial_cost", r.initial_cost},
              {"cost", r.cost},
              {"projected_gradient_norm", r.gradient_norm}}
             .dump()
      << '\n';
  if (!r.converged) {
    std::cerr << "fit did not converge in " << r.iterations
              << " iterations; best iterate written to " << a.out << '\n';
    return kExitNonConvergence;
  }
  std::cout << "converged in " << r.iterations << " iterations, cost " << r.cost << '\n';
  return kExitOk;
}

// -------------------------------------------------------------- deconvolve

struct DeconvolveArgs {
  std::string tac;
  std::string config;
  std::string rho;
  GridFlags grid;
  double r1 = 0.0;
  double r2 = 1e-3;
  bool auto_reg = false;
  std::vector<std::string> training;
  std::string variant = "tq";
  double alpha = 0.75;
  std::uint64_t seed = 1;
  int samples = 1000;
  double threshold = 0.001;
  int threads = 0;
  std::string out = "result.csv";
  std::string stats_out;
  CLI::Option* rho_opt = nullptr;
  CLI::Option* r1_opt = nullptr;
  CLI::Option* r2_opt = nullptr;
  CLI::Option* auto_opt = nullptr;
  CLI::Option* variant_opt = nullptr;
  CLI::Option* alpha_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* samples_opt = nullptr;
  CLI::Option* threshold_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

int run_deconvolve(DeconvolveArgs& a) {
  const KeyValue kv = load_config(a.config);
  const DiscretizationGrid grid = a.grid.resolve(kv);
  from_config(a.rho_opt, kv, "rho", a.rho);
  from_config(a.r1_opt, kv, "r1", a.r1);
  from_config(a.r2_opt, kv, "r2", a.r2);
  from_config(a.auto_opt, kv, "auto_reg", a.auto_reg);
  from_config(a.variant_opt, kv, "variant", a.variant);
  from_config(a.alpha_opt, kv, "alpha", a.alpha);
  from_config(a.seed_opt, kv, "seed", a.seed);
  from_config(a.samples_opt, kv, "n_samples", a.samples);
  from_config(a.threshold_opt, kv, "threshold", a.threshold);
  from_config(a.threads_opt, kv, "threads", a.threads);
  if (a.rho.empty()) throw ConfigError("--rho is required");
  if (a.auto_reg && a.training.empty()) {
    throw ConfigError("--auto-reg requires training episodes (--training)");
  }
  const Variant variant = parse_variant(a.variant);
  const unsigned threads = static_cast<unsigned>(std::max(a.threads, 0));
  const PopulationParams rho = PopulationParams::load(a.rho);

  const Episode ep = parse_episode(a.tac);
  if (!ep.has_tac()) throw ValidationError("episode '" + ep.id + "' has no TAC samples");
  if (ep.tac.size() < 2) throw ValidationError("episode '" + ep.id + "' needs at least two TAC samples");
  const GridEpisode g = to_grid(ep, grid.tau);

  double r1 = a.r1, r2 = a.r2;
  json summary;
  if (a.auto_reg) {
    RegularizationOptions ro;
    ro.threads = threads;
    const RegularizationResult reg =
        select_regularization(load_training(a.training, grid.tau), rho, grid, variant, ro);
    r1 = reg.r1;
    r2 = reg.r2;
    summary["selection_objective"] = reg.objective;
    summary["selection_converged"] = reg.converged;
  }

  const DiscreteTimeOps ops = deconvolution_model(rho, grid);
  const DeconvolutionResult res = deconvolve(build_problem(ops, grid, g.y, r1, r2, variant));
  CredibleBand band;
  StatsIntervals intervals;
  if (variant == Variant::tq) {
    band = credible_band(res, rho, grid, a.alpha, a.samples, a.seed);
    intervals = stats_credible_intervals(res, rho, grid, a.alpha, a.samples, a.seed, a.threshold);
  } else {
    const ScalarUncertainty su =
        scalar_uncertainty(g.y, rho, grid, a.alpha, a.samples, a.seed, r1, r2, a.threshold, threads);
    band = su.band;
    intervals = su.intervals;
  }

  const Eigen::Index steps = res.steps();
  const double y0 = resample(ep.tac, grid.tau, g.origin, 1)(0);
  write_columns(a.out,
                {"t_minutes", "mean_brac", "lower_band", "upper_band", "fitted_tac", "measured_tac"},
                {time_rows(g.origin, grid.tau, steps), input_rows(res.mean_curve),
                 input_rows(band.lower), input_rows(band.upper), output_rows(0.0, res.fitted_tac),
                 output_rows(y0, g.y)});

  if (!a.stats_out.empty()) {
    StatsReportRow row;
    row.episode = ep.id;
    row.estimated = episode_stats(res.mean_curve, grid.tau, a.threshold);
    row.intervals = intervals;
    row.has_intervals = true;
    if (ep.has_brac() && ep.brac.size() >= 2) {
      row.measured = episode_stats(g.u, grid.tau, a.threshold);
      row.has_measured = true;
    }
    std::ofstream out(a.stats_out);
    if (!out) throw ConfigError("cannot write '" + a.stats_out + "'");
    write_stats_report(out, {row});
  }

  summary["variant"] = a.variant;
  summary["r1"] = r1;
  summary["r2"] = r2;
  summary["alpha"] = a.alpha;
  summary["seed"] = a.seed;
  summary["kept_samples"] = band.kept;
  summary["objective"] = res.residual;
  summary["converged"] = res.converged;
  std::cout << summary.dump() << '\n';
  if (!res.converged) {
    std::cerr << "nonnegative least squares hit its iteration cap; results written\n";
    return kExitNonConvergence;
  }
  return kExitOk;
}

// ------------------------------------------------------------------- stats

struct StatsArgs {
  std::string curve;
  std::string column;
  std::string out;
  double threshold = 0.001;
  double tau = 1.0;
};

int run_stats(const StatsArgs& a) {
  std::ifstream in(a.curve);
  if (!in) throw ConfigError("cannot open '" + a.curve + "'");
  std::string header;
  std::getline(in, header);
  in.clear();
  in.seekg(0);

  Eigen::VectorXd curve;
  double tau = a.tau;
  if (header.rfind("t_minutes,channel,value", 0) == 0) {
    const Episode ep = parse_episode(a.curve);
    if (ep.brac.size() < 2) throw ValidationError("'" + a.curve + "' needs at least two BrAC samples");
    curve = resample(ep.brac, tau, ep.brac.front().t,
                     static_cast<int>(std::floor((ep.brac.back().t - ep.brac.front().t) / tau + 1e-9)) + 1);
  } else {
    std::map<std::string, Eigen::VectorXd> cols;
    try {
      cols = read_columns(in);
    } catch (const ParseError& e) {
      throw ParseError(a.curve + ": " + e.what(), e.line());
    }
    std::string name = a.column;
    if (name.empty()) {
      for (const char* c : {"mean_brac", "brac", "value"}) {
        if (cols.count(c)) {
          name = c;
          break;
        }
      }
    }
    if (name.empty() || !cols.count(name)) {
      throw ConfigError("no BrAC column in '" + a.curve + "' (use --column)");
    }
    if (!cols.count("t_minutes")) throw ConfigError("'" + a.curve + "' has no t_minutes column");
    const Eigen::VectorXd& t = cols.at("t_minutes");
    curve = cols.at(name);
    if (curve.size() < 2) throw ValidationError("'" + a.curve + "' needs at least two rows");
    tau = t(1) - t(0);
    for (Eigen::Index k = 1; k < t.size(); ++k) {
      if (!(std::abs(t(k) - t(k - 1) - tau) <= 1e-6 * std::max(1.0, std::abs(tau))) || !(tau > 0.0)) {
        throw InputError("'" + a.curve + "' is not sampled on a uniform time grid");
      }
    }
  }

  const EpisodeStats s = episode_stats(curve, tau, a.threshold);
  std::ostringstream text;
  text << "curve,I_peak,II_peak_time_h,III_auc,IV_elimination_rate,V_absorption_rate\n"
       << stem_of(a.curve);
  for (int i = 0; i < EpisodeStats::kCount; ++i) {
    const double v = s.value(i);
    text << ',' << (std::isnan(v) ? std::string("n/a") : detail::format_full(v));
  }
  text << '\n';
  if (a.out.empty()) {
    std::cout << text.str();
  } else {
    std::ofstream out(a.out);
    if (!out) throw ConfigError("cannot write '" + a.out + "'");
    out << text.str();
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Population-model deconvolution of transdermal alcohol data"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Generate synthetic episodes from a config file");
  simulate->add_option("config", sim.config, "Flat key=value config")->required();
  simulate->add_option("--out", sim.out, "Output directory");
  sim.seed_opt = simulate->add_option("--seed", sim.seed, "Random seed; episode i uses stream i");
  sim.n_opt = simulate->add_option("--n-episodes", sim.n_episodes, "Number of episodes");
  sim.noise_opt = simulate->add_option("--noise-sigma", sim.noise_sigma, "TAC noise standard deviation");
  sim.mode_opt = simulate->add_option("--mode", sim.mode, "population or individual");

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit the population distribution to training episodes");
  fit->add_option("episodes", fa.episodes, "Episode CSV files with BrAC and TAC")->required();
  fit->add_option("--config", fa.config, "Flat key=value config; flags take precedence");
  fa.grid.add(*fit);
  fit->add_option("--out", fa.out, "Fitted parameter file");
  fit->add_option("--log", fa.log, "JSON-lines optimiser log");
  fit->add_option("--init", fa.init, "Initial parameter file (default: from per-episode fits)");
  fa.max_iter_opt = fit->add_option("--max-iter", fa.max_iter, "Optimiser iteration cap");
  fa.gtol_opt = fit->add_option("--gtol", fa.gtol, "Projected-gradient tolerance");
  fa.threads_opt = fit->add_option("--threads", fa.threads, "Worker threads (0 = all cores)");

  DeconvolveArgs da;
  auto* dec = app.add_subcommand("deconvolve", "Estimate BrAC with credible band from a TAC episode");
  dec->add_option("tac", da.tac, "Episode CSV holding TAC")->required();
  dec->add_option("--config", da.config, "Flat key=value config; flags take precedence");
  da.rho_opt = dec->add_option("--rho", da.rho, "Population parameter file");
  da.grid.add(*dec);
  da.r1_opt = dec->add_option("--r1", da.r1, "Weight of the L2 penalty");
  da.r2_opt = dec->add_option("--r2", da.r2, "Weight of the derivative penalty");
  da.auto_opt = dec->add_flag("--auto-reg", da.auto_reg, "Select r1, r2 on training episodes");
  dec->add_option("--training", da.training, "Training episodes for --auto-reg");
  da.variant_opt = dec->add_option("--variant", da.variant, "tq or scalar");
  da.alpha_opt = dec->add_option("--alpha", da.alpha, "Credible level");
  da.seed_opt = dec->add_option("--seed", da.seed, "Seed shared by the band and the intervals");
  da.samples_opt = dec->add_option("--samples", da.samples, "Parameter samples drawn");
  da.threshold_opt = dec->add_option("--threshold", da.threshold, "BrAC level counted as zero");
  da.threads_opt = dec->add_option("--threads", da.threads, "Worker threads (0 = all cores)");
  dec->add_option("--out", da.out, "Result CSV");
  dec->add_option("--stats-out", da.stats_out, "Statistics report CSV");

  StatsArgs sa;
  auto* stats = app.add_subcommand("stats", "Statistics I-V of a BrAC curve");
  stats->add_option("curve", sa.curve, "CSV with t_minutes and a BrAC column, or an episode file")
      ->required();
  stats->add_option("--column", sa.column, "BrAC column name");
  stats->add_option("--threshold", sa.threshold, "BrAC level counted as zero");
  stats->add_option("--tau", sa.tau, "Resampling step in minutes for episode files");
  stats->add_option("--out", sa.out, "Output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*simulate) return run_simulate(sim);
    if (*fit) return run_fit(fa);
    if (*dec) return run_deconvolve(da);
    if (*stats) return run_stats(sa);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNonConvergence;
  } catch (const FitError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNonConvergence;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
