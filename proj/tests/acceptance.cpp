#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "tacbrac/tacbrac.hpp"

using namespace tacbrac;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s [%d] %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <class... T>
std::string fmt(const char* f, T... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

PopulationParams make(double mu1, double mu2, double s11, double s12, double s22, double b1,
                      double b2) {
  PopulationParams p;
  p.a.setZero();
  p.b << b1, b2;
  p.mu << mu1, mu2;
  p.sigma << s11, s12, s12, s22;
  return p;
}

PopulationParams reference_rho() {
  return make(0.6245, 1.0274, 0.0259, 0.0067, 0.1227, 1.4942, 2.0409);
}

PopulationParams random_rho(std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double sd1 = 0.1 + 0.1 * u(gen), sd2 = 0.2 + 0.2 * u(gen);
  const double corr = -0.5 + u(gen);
  return make(0.5 + 0.3 * u(gen), 0.8 + 0.4 * u(gen), sd1 * sd1, corr * sd1 * sd2, sd2 * sd2,
              1.3 + 0.4 * u(gen), 1.8 + 0.5 * u(gen));
}

std::vector<SynthEpisode> synth(const PopulationParams& rho, int count, double noise,
                                std::uint64_t seed, SynthMode mode = SynthMode::population) {
  SynthConfig cfg;
  cfg.rho_true = rho;
  cfg.n_episodes = count;
  cfg.noise_sigma = noise;
  cfg.seed = seed;
  cfg.mode = mode;
  return generate(cfg);
}

std::vector<GridEpisode> on_grid(const std::vector<SynthEpisode>& eps, double tau = 1.0) {
  std::vector<GridEpisode> out;
  for (const auto& e : eps) out.push_back(to_grid(e.episode, tau));
  return out;
}

// ------------------------------------------------------------------ 1

void gradient_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const PopulationParams rho = random_rho(gen);
    const auto eps = on_grid(synth(reference_rho(), 2, 0.002, 500 + trial));
    DiscretizationGrid grid;
    grid.n = grid.m1 = grid.m2 = 4;
    // The cell quadrature order is pinned so the finite differences see one smooth function.
    grid.cell_order = cell_moments(rho, ParamMesh(grid.m1, rho.a(0), rho.b(0)),
                                   ParamMesh(grid.m2, rho.a(1), rho.b(1)))
                          .order;
    const Eigen::VectorXd g = gradient(rho, eps, grid);
    const Eigen::VectorXd th = to_theta(rho);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < th.size(); ++i) {
      Eigen::VectorXd tp = th, tm = th;
      tp(i) += h;
      tm(i) -= h;
      const double fd =
          (cost(from_theta(tp, rho.a), eps, grid) - cost(from_theta(tm, rho.a), eps, grid)) / (2 * h);
      worst = std::max(worst, std::abs(g(i) - fd) / std::max(std::abs(fd), 1e-300));
    }
  }
  const double elapsed = seconds_since(t0);
  report(1, "gradient correctness", worst <= 1e-4 && elapsed <= 120.0,
         fmt("max relative component error %.3g (limit 1e-4) over 20 instances, %.1f s (limit 120 s)",
             worst, elapsed));
}

// ------------------------------------------------------------------ 2

void convolution_equivalence() {
  std::mt19937_64 gen(77);
  std::uniform_real_distribution<double> u(0.0, 0.1);
  const int steps = 240;
  DiscretizationGrid grid;
  double worst = 0.0, worst_dense = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const DiscreteTimeOps ops(assemble(random_rho(gen), grid));
    const Kernels k = impulse_kernels(ops, steps);
    Eigen::VectorXd input(steps);
    for (int j = 0; j < steps; ++j) input(j) = u(gen);
    const Eigen::VectorXd by_kernels = convolve(k, input);
    worst = std::max(worst, (by_kernels - simulate(ops, input)).cwiseAbs().maxCoeff());

    // Dense state recursion assembled here from the block operators.
    const Eigen::MatrixXd a = ops.Ahat();
    const Eigen::VectorXd b = ops.Bhat_scalar();
    const Eigen::RowVectorXd c = ops.Chat();
    Eigen::VectorXd x = Eigen::VectorXd::Zero(a.rows());
    for (int j = 0; j < steps; ++j) {
      x = a * x + b * input(j);
      worst_dense = std::max(worst_dense, std::abs(c.dot(x) - by_kernels(j)));
    }
  }
  report(2, "convolution equivalence", worst <= 1e-9 && worst_dense <= 1e-9,
         fmt("sup-norm kernel sum vs recursion %.3g, vs dense recursion %.3g (limit 1e-9), "
             "20 inputs, K=240",
             worst, worst_dense));
}

// ------------------------------------------------------------------ 3

void semigroup_identity() {
  std::mt19937_64 gen(91);
  DiscretizationGrid grid;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const DiscreteSystem sys = assemble(random_rho(gen), grid);
    const Eigen::MatrixXd one = DiscreteTimeOps(sys, grid.model_step()).Ahat();
    const Eigen::MatrixXd two = DiscreteTimeOps(sys, 2.0 * grid.model_step()).Ahat();
    worst = std::max(worst, (two - one * one).norm() / two.norm());
  }
  report(3, "semigroup identity", worst <= 1e-8,
         fmt("max relative Frobenius error %.3g (limit 1e-8) over 20 distributions", worst));
}

// ------------------------------------------------------------------ 4

void density_correctness() {
  const PopulationParams rho = reference_rho();

  // Normalisation against a dense tensor Gauss-Legendre sum of the untruncated normal.
  const BivariateNormal phi(rho);
  const int tiles = 40;
  const double hx = (rho.b(0) - rho.a(0)) / tiles, hy = (rho.b(1) - rho.a(1)) / tiles;
  double z_ref = 0.0;
  for (int i = 0; i < tiles; ++i) {
    for (int j = 0; j < tiles; ++j) {
      z_ref += quad::tensor_gauss(phi,
                                  quad::Box{rho.a(0) + i * hx, rho.a(0) + (i + 1) * hx,
                                            rho.a(1) + j * hy, rho.a(1) + (j + 1) * hy},
                                  12);
    }
  }
  const TruncatedNormal2d dist(rho);
  const double norm_err = std::abs(dist.normalization() - z_ref);

  // Monte Carlo oracle: independent rejection sampler.
  const std::size_t n = 1000000;
  const Eigen::Matrix2d l = rho.sigma.llt().matrixL();
  std::mt19937_64 gen(4242);
  std::normal_distribution<double> normal(0.0, 1.0);
  DiscretizationGrid grid;
  const ParamMesh pm1(grid.m1, rho.a(0), rho.b(0)), pm2(grid.m2, rho.a(1), rho.b(1));
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(grid.m1, grid.m2);
  const double radius = credible_region_radius(rho, 0.75).radius;
  std::size_t in_disk = 0;
  for (std::size_t accepted = 0; accepted < n;) {
    const Eigen::Vector2d q = rho.mu + l * Eigen::Vector2d(normal(gen), normal(gen));
    if (q(0) < rho.a(0) || q(0) > rho.b(0) || q(1) < rho.a(1) || q(1) > rho.b(1)) continue;
    ++accepted;
    const int i = std::min(grid.m1 - 1, static_cast<int>((q(0) - rho.a(0)) / pm1.width()));
    const int j = std::min(grid.m2 - 1, static_cast<int>((q(1) - rho.a(1)) / pm2.width()));
    counts(i, j) += 1.0;
    if ((q - rho.mu).norm() <= radius) ++in_disk;
  }
  const Eigen::MatrixXd mass = cell_masses(rho, pm1, pm2);
  double worst_se = 0.0;
  for (int i = 0; i < grid.m1; ++i) {
    for (int j = 0; j < grid.m2; ++j) {
      const double p = counts(i, j) / static_cast<double>(n);
      const double se = std::sqrt(std::max(p * (1.0 - p), 1e-12) / static_cast<double>(n));
      worst_se = std::max(worst_se, std::abs(mass(i, j) - p) / se);
    }
  }
  const double disk_quad = disk_probability(dist, radius);
  const double disk_mc = static_cast<double>(in_disk) / static_cast<double>(n);
  const double disk_err = std::max(std::abs(disk_quad - 0.75), std::abs(disk_mc - 0.75));
  report(4, "density correctness", norm_err <= 1e-8 && worst_se <= 4.0 && disk_err <= 1e-3,
         fmt("normalisation error %.3g (limit 1e-8); worst cell mass %.2f SE from 1e6-sample "
             "Monte Carlo (limit 4); disk mass quadrature %.6f, Monte Carlo %.6f (limit 0.75 +- 1e-3)",
             norm_err, worst_se, disk_quad, disk_mc));
}

// ------------------------------------------------------------------ 5

void fit_recovery() {
  const auto t0 = Clock::now();
  const PopulationParams truth = reference_rho();
  const auto eps = on_grid(synth(truth, 5, 0.0, 31));
  DiscretizationGrid grid;
  grid.n = grid.m1 = grid.m2 = 4;
  const FitResult r = fit_population(eps, grid);
  const Eigen::Vector2d mu_err =
      ((r.rho_star.mu - truth.mu).array() / truth.mu.array()).abs().matrix();
  const double sigma_err = (r.rho_star.sigma - truth.sigma).norm() / truth.sigma.norm();
  const double elapsed = seconds_since(t0);
  report(5, "population-fit recovery",
         mu_err.maxCoeff() <= 0.05 && sigma_err <= 0.25 && elapsed <= 600.0,
         fmt("mu relative errors %.4f, %.4f (limit 0.05); Sigma Frobenius-relative error %.4f "
             "(limit 0.25); %d iterations, converged %d, %.1f s (limit 600 s)",
             mu_err(0), mu_err(1), sigma_err, r.iterations, r.converged ? 1 : 0, elapsed));
}

// ------------------------------------------------------------------ 6

struct RoundTrip {
  double rel_l2 = 0.0;
  double peak_err = 0.0;
  double r1 = 0.0, r2 = 0.0;
};

RoundTrip round_trip(Variant variant, double noise_fraction) {
  const PopulationParams rho = reference_rho();
  const DiscretizationGrid grid;
  double peak = 0.0;
  for (const auto& e : synth(rho, 4, 0.0, 1)) peak = std::max(peak, e.y_clean.maxCoeff());
  const auto eps = synth(rho, 4, noise_fraction * peak, 1);
  const std::vector<SynthEpisode> train_eps(eps.begin(), eps.begin() + 3);
  const RegularizationResult reg = select_regularization(on_grid(train_eps), rho, grid, variant);
  const GridEpisode test = to_grid(eps[3].episode, grid.tau);
  const DeconvolutionResult res = deconvolve(
      build_problem(deconvolution_model(rho, grid), grid, test.y, reg.r1, reg.r2, variant));
  const Eigen::VectorXd& truth = eps[3].u;
  RoundTrip out;
  out.rel_l2 = (res.mean_curve - truth).norm() / truth.norm();
  out.peak_err = std::abs(res.mean_curve.maxCoeff() - truth.maxCoeff()) / truth.maxCoeff();
  out.r1 = reg.r1;
  out.r2 = reg.r2;
  return out;
}

void deconvolution_round_trip() {
  const RoundTrip clean = round_trip(Variant::tq, 0.0);
  const RoundTrip noisy = round_trip(Variant::tq, 0.01);
  report(6, "deconvolution round trip",
         clean.rel_l2 <= 0.10 && clean.peak_err <= 0.10 && noisy.rel_l2 <= 0.25,
         fmt("tq variant, auto (r1, r2): noiseless relative L2 %.4f (limit 0.10), peak error %.4f "
             "(limit 0.10) at r = (%.3g, %.3g); 1%% noise relative L2 %.4f (limit 0.25) at "
             "r = (%.3g, %.3g)",
             clean.rel_l2, clean.peak_err, clean.r1, clean.r2, noisy.rel_l2, noisy.r1, noisy.r2));
  const RoundTrip s_clean = round_trip(Variant::scalar, 0.0);
  const RoundTrip s_noisy = round_trip(Variant::scalar, 0.01);
  std::printf("INFO [6] scalar variant: noiseless relative L2 %.4f, peak error %.4f; "
              "1%% noise relative L2 %.4f\n",
              s_clean.rel_l2, s_clean.peak_err, s_noisy.rel_l2);
}

// ------------------------------------------------------------------ 7

void nnls_optimality() {
  std::mt19937_64 gen(606);
  std::normal_distribution<double> n(0.0, 1.0);
  std::exponential_distribution<double> e(2.0);
  double worst_kkt = 0.0;
  int beaten = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = 10 + trial % 30, cols = 3 + trial % 15;
    Eigen::MatrixXd a(rows, cols);
    Eigen::VectorXd b(rows);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) a(i, j) = n(gen);
      b(i) = n(gen);
    }
    const Eigen::VectorXd x = nnls(a, b).x;
    // KKT: x >= 0, w = A'(b - Ax) <= 0, w_i = 0 on the support.
    const Eigen::VectorXd w = a.transpose() * (b - a * x);
    const double scale = (a.transpose() * b).cwiseAbs().maxCoeff();
    double kkt = std::max(0.0, -x.minCoeff());
    for (int i = 0; i < cols; ++i) {
      kkt = std::max(kkt, std::max(0.0, w(i)) / scale);
      if (x(i) > 0.0) kkt = std::max(kkt, std::abs(w(i)) / scale);
    }
    worst_kkt = std::max(worst_kkt, kkt);
    const double obj = (a * x - b).squaredNorm();
    for (int s = 0; s < 1000; ++s) {
      Eigen::VectorXd z(cols);
      for (int i = 0; i < cols; ++i) z(i) = (s % 3 == 0 && i % 2) ? 0.0 : e(gen);
      if ((a * z - b).squaredNorm() < obj - 1e-12) ++beaten;
    }
  }
  report(7, "NNLS optimality", worst_kkt <= 1e-8 && beaten == 0,
         fmt("worst scaled KKT residual %.3g (limit 1e-8) over 100 problems; %d of 100000 random "
             "feasible points beat the solution (limit 0)",
             worst_kkt, beaten));
}

// ------------------------------------------------------------------ 8

void mesh_refinement() {
  const PopulationParams rho = reference_rho();
  const SynthEpisode ep = synth(rho, 1, 0.0, 3)[0];
  std::vector<Eigen::VectorXd> ys;
  for (int level : {4, 8, 16}) {
    DiscretizationGrid grid;
    grid.n = grid.m1 = grid.m2 = level;
    ys.push_back(simulate(DiscreteTimeOps(assemble(rho, grid)), ep.u));
  }
  const double dy1 = (ys[1] - ys[0]).cwiseAbs().maxCoeff();
  const double dy2 = (ys[2] - ys[1]).cwiseAbs().maxCoeff();

  DiscretizationGrid grid;
  const GridEpisode g = to_grid(ep.episode, grid.tau);
  const DiscreteTimeOps ops = deconvolution_model(rho, grid);
  std::vector<Eigen::VectorXd> curves;
  for (int m : {14, 28, 56}) {
    grid.m = m;
    curves.push_back(deconvolve(build_problem(ops, grid, g.y, 0.0, 1e-3, Variant::tq)).mean_curve);
  }
  const double du1 = (curves[1] - curves[0]).cwiseAbs().maxCoeff();
  const double du2 = (curves[2] - curves[1]).cwiseAbs().maxCoeff();
  report(8, "mesh-refinement convergence", dy1 > dy2 && du1 > du2,
         fmt("simulated y deltas (4->8) %.3g > (8->16) %.3g; mean-curve deltas (m 14->28) %.3g > "
             "(28->56) %.3g",
             dy1, dy2, du1, du2));
}

// ------------------------------------------------------------------ 9

void statistics_correctness() {
  bool ok = true;
  double worst_steps = 0.0;
  for (double tau : {0.5, 1.0, 2.0, 5.0}) {
    const int n = static_cast<int>(std::lround(120.0 / tau)) + 1;
    Eigen::VectorXd c(n);
    for (int j = 0; j < n; ++j) {
      const double t = j * tau;
      c(j) = t <= 60.0 ? 0.08 * t / 60.0 : 0.08 * (120.0 - t) / 60.0;
    }
    const EpisodeStats s = episode_stats(c, tau, 0.001);
    // Exact values of the continuous triangle: the threshold is crossed 0.75 min
    // from either end.
    const double step_h = tau / 60.0;
    const double exact_elim = 0.08 / ((60.0 - 0.75) / 60.0);
    const double exact_abs = 0.08 / ((60.0 - 0.75) / 60.0);
    auto time_gap = [&](double rate, double exact) { return std::abs(0.08 / rate - 0.08 / exact); };
    const double gaps[] = {std::abs(s.peak_time - 1.0), time_gap(s.elimination_rate, exact_elim),
                           time_gap(s.absorption_rate, exact_abs)};
    for (double gap : gaps) worst_steps = std::max(worst_steps, gap / step_h);
    ok = ok && std::abs(s.peak - 0.08) <= 1e-12 && std::abs(s.auc - 0.08) <= 1e-12;
  }
  ok = ok && worst_steps <= 1.0;

  EpisodeStats fixture;
  fixture.peak = 0.0520;
  fixture.peak_time = 0.7500;
  fixture.auc = 0.1019;
  fixture.elimination_rate = 0.0173;
  fixture.absorption_rate = 0.0693;
  StatsIntervals interval;
  interval.lo = {0.0286, 0.4167, 0.0644, 0.0060, 0.0203};
  interval.hi = {0.0661, 0.7000, 0.1687, 0.0105, 0.0444};
  const bool rows = render_stats_row(fixture) == "0.0520, 0.7500, 0.1019, 0.0173, 0.0693" &&
                    render_interval_row(interval) ==
                        "[0.0286,0.0661], [0.4167,0.7000], [0.0644,0.1687], [0.0060,0.0105], "
                        "[0.0203,0.0444]";
  report(9, "statistics correctness", ok && rows,
         fmt("triangle times within %.3f sampling steps of exact (limit 1), peak and AUC exact; "
             "fixture rows render verbatim: %s",
             worst_steps, rows ? "yes" : "no"));
}

// ------------------------------------------------------------------ 10

void variant_consistency() {
  const PopulationParams rho = reference_rho();
  const SynthEpisode ep = synth(rho, 1, 0.001, 5)[0];
  DiscretizationGrid single;
  single.m1 = single.m2 = 1;
  const GridEpisode g = to_grid(ep.episode, single.tau);
  const DiscreteTimeOps ops1 = deconvolution_model(rho, single);
  const Eigen::VectorXd s = deconvolve(build_problem(ops1, single, g.y, 1e-3, 1e-2, Variant::scalar)).mean_curve;
  const Eigen::VectorXd t = deconvolve(build_problem(ops1, single, g.y, 1e-3, 1e-2, Variant::tq)).mean_curve;
  const double agree = (s - t).cwiseAbs().maxCoeff();

  const DiscretizationGrid grid;
  const DeconvolutionResult tq =
      deconvolve(build_problem(deconvolution_model(rho, grid), grid, g.y, 0.0, 1e-3, Variant::tq));
  const CredibleBand band_tq = credible_band(tq, rho, grid, 0.75, 1000, 1);
  const CredibleBand band_sc = credible_band_scalar(g.y, rho, grid, 0.75, 1000, 1, 0.0, 1e-3);
  Eigen::Index overlap = 0;
  for (Eigen::Index j = 0; j < band_tq.lower.size(); ++j) {
    if (std::max(band_tq.lower(j), band_sc.lower(j)) <= std::min(band_tq.upper(j), band_sc.upper(j))) {
      ++overlap;
    }
  }
  const double frac = static_cast<double>(overlap) / static_cast<double>(band_tq.lower.size());
  report(10, "variant consistency", agree <= 1e-8 && frac >= 0.9,
         fmt("single-cell sup-norm difference %.3g (limit 1e-8); full-grid bands overlap on %.1f%% "
             "of time points (limit 90%%)",
             agree, 100.0 * frac));
}

template <class F>
void guarded(int id, const char* name, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(id, name, false, std::string("threw: ") + e.what());
  }
}

}  // namespace

int main() {
  guarded(1, "gradient correctness", gradient_correctness);
  guarded(2, "convolution equivalence", convolution_equivalence);
  guarded(3, "semigroup identity", semigroup_identity);
  guarded(4, "density correctness", density_correctness);
  guarded(5, "population-fit recovery", fit_recovery);
  guarded(6, "deconvolution round trip", deconvolution_round_trip);
  guarded(7, "NNLS optimality", nnls_optimality);
  guarded(8, "mesh-refinement convergence", mesh_refinement);
  guarded(9, "statistics correctness", statistics_correctness);
  guarded(10, "variant consistency", variant_consistency);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
