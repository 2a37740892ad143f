#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

#include "tacbrac/data_io.hpp"
#include "tacbrac/density.hpp"
#include "tacbrac/error.hpp"
#include "tacbrac/forward_model.hpp"
#include "tacbrac/grid_basis.hpp"
#include "tacbrac/optim.hpp"
#include "tacbrac/parallel.hpp"

namespace tacbrac {

/// Layout of the optimisation vector:
/// (b1, b2, mu1, mu2, L11, L21, L22[, a1, a2]) with L the lower Cholesky
/// factor of sigma. The lower bounds are appended only when they are free.
enum ThetaIndex { kB1 = 0, kB2, kMu1, kMu2, kL11, kL21, kL22, kA1, kA2 };

inline Eigen::VectorXd to_theta(const PopulationParams& rho, bool include_lower = false) {
  const Eigen::Matrix2d l = rho.cholesky();
  Eigen::VectorXd t(include_lower ? 9 : 7);
  t << rho.b(0), rho.b(1), rho.mu(0), rho.mu(1), l(0, 0), l(1, 0), l(1, 1);
  if (include_lower) t.tail(2) = rho.a;
  return t;
}

inline PopulationParams from_theta(const Eigen::VectorXd& t, const Eigen::Vector2d& fixed_lower) {
  Eigen::Matrix2d l = Eigen::Matrix2d::Zero();
  l(0, 0) = t(kL11);
  l(1, 0) = t(kL21);
  l(1, 1) = t(kL22);
  const Eigen::Vector2d a = t.size() >= 9 ? Eigen::Vector2d(t(kA1), t(kA2)) : fixed_lower;
  return PopulationParams::from_cholesky(a, Eigen::Vector2d(t(kB1), t(kB2)),
                                         Eigen::Vector2d(t(kMu1), t(kMu2)), l);
}

namespace detail {

inline void check_episode(const GridEpisode& ep, const DiscretizationGrid& grid) {
  if (ep.u.size() == 0 || ep.y.size() == 0) {
    throw ValidationError("episode '" + ep.id + "' needs both BrAC and TAC on the grid");
  }
  if (ep.u.size() != ep.y.size()) throw InputError("episode '" + ep.id + "': u and y lengths differ");
  if (std::abs(ep.tau - grid.tau) > 1e-12 * grid.tau) {
    throw InputError("episode '" + ep.id + "' was resampled with a different step");
  }
}

// Residual r_k = y_model - y_obs at observed indices, zero elsewhere.
inline Eigen::VectorXd masked_residual(const GridEpisode& ep, const Eigen::VectorXd& model) {
  Eigen::VectorXd r = Eigen::VectorXd::Zero(model.size());
  for (int k : ep.observed) r(k) = model(k) - ep.y(k);
  return r;
}

inline Eigen::VectorXd observed_residual(const GridEpisode& ep, const Eigen::VectorXd& model) {
  Eigen::VectorXd r(ep.observed.size());
  for (std::size_t i = 0; i < ep.observed.size(); ++i) {
    r(i) = model(ep.observed[i]) - ep.y(ep.observed[i]);
  }
  return r;
}

// Sensitivity of one cell's one-step operators to its conditional mean qbar1.
struct CellSensitivity {
  Eigen::MatrixXd dahat;
  Eigen::VectorXd dbeta_unit;
};

inline std::vector<CellSensitivity> q1_sensitivities(const DiscreteSystem& sys,
                                                     const DiscreteTimeOps& ops) {
  const Eigen::MatrixXd da = sys.generator_dq1();
  const Eigen::VectorXd b = sys.unit_input();
  std::vector<CellSensitivity> out(ops.cells());
  for (int c = 0; c < ops.cells(); ++c) {
    const CellOps& cell = ops.cell(c);
    out[c].dahat = expm_directional(cell.a, da, ops.step());
    out[c].dbeta_unit = cell.lu.solve(out[c].dahat * b - da * cell.beta_unit);
  }
  return out;
}

// Cost of one episode and, optionally, its derivative with respect to the
// per-cell quantities (p_c, qbar1_c, qbar2_c) by the adjoint recursion.
struct EpisodeTerms {
  double cost = 0.0;
  Eigen::VectorXd residual;  // at observed indices
  Eigen::VectorXd g_mass, g_q1, g_q2;
};

inline EpisodeTerms episode_terms(const DiscreteTimeOps& ops,
                                  const std::vector<CellSensitivity>* sens,
                                  const GridEpisode& ep) {
  const int steps = static_cast<int>(ep.u.size());
  const int cells = ops.cells();
  const int s = ops.block_size();
  EpisodeTerms out;
  if (sens == nullptr) {
    const Eigen::VectorXd model = simulate(ops, ep.u);
    out.residual = observed_residual(ep, model);
    out.cost = out.residual.squaredNorm();
    return out;
  }
  // Forward pass keeping every state, x_0 = 0 in column 0.
  std::vector<Eigen::MatrixXd> states(cells);
  Eigen::VectorXd model = Eigen::VectorXd::Zero(steps);
  for (int c = 0; c < cells; ++c) {
    const CellOps& cell = ops.cell(c);
    Eigen::MatrixXd& x = states[c];
    x.setZero(s, steps + 1);
    for (int k = 1; k <= steps; ++k) {
      x.col(k).noalias() = cell.ahat * x.col(k - 1) + cell.beta * ep.u(k - 1);
    }
    model += ops.cell_mass()(c) * x.row(0).tail(steps).transpose();
  }
  const Eigen::VectorXd r = masked_residual(ep, model);
  out.residual = observed_residual(ep, model);
  out.cost = out.residual.squaredNorm();
  out.g_mass.resize(cells);
  out.g_q1.resize(cells);
  out.g_q2.resize(cells);
  for (int c = 0; c < cells; ++c) {
    const CellOps& cell = ops.cell(c);
    const Eigen::MatrixXd& x = states[c];
    const double p = ops.cell_mass()(c);
    out.g_mass(c) = 2.0 * r.dot(x.row(0).tail(steps).transpose());
    if (p == 0.0) {
      out.g_q1(c) = 0.0;
      out.g_q2(c) = 0.0;
      continue;
    }
    const Eigen::MatrixXd at = cell.ahat.transpose();
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(s);
    Eigen::MatrixXd big_lambda = Eigen::MatrixXd::Zero(s, s);
    Eigen::VectorXd sum_u = Eigen::VectorXd::Zero(s);
    for (int k = steps; k >= 1; --k) {
      lambda = at * lambda;
      lambda(0) += 2.0 * r(k - 1) * p;
      big_lambda.noalias() += lambda * x.col(k - 1).transpose();
      sum_u += lambda * ep.u(k - 1);
    }
    const CellSensitivity& cs = (*sens)[c];
    out.g_q1(c) = (cs.dahat.array() * big_lambda.array()).sum() +
                  ops.mean_q2()(c) * cs.dbeta_unit.dot(sum_u);
    out.g_q2(c) = cell.beta_unit.dot(sum_u);
  }
  return out;
}

}  // namespace detail

/// Cost, residuals and (optionally) gradient of the population least-squares
/// problem at rho.
struct Evaluation {
  double cost = 0.0;
  Eigen::VectorXd gradient;  ///< in the theta layout; empty unless requested
  std::vector<Eigen::VectorXd> residuals;
};

inline Evaluation evaluate(const PopulationParams& rho, const std::vector<GridEpisode>& episodes,
                           const DiscretizationGrid& grid, bool with_gradient,
                           bool include_lower = false, unsigned threads = 0) {
  if (episodes.empty()) throw ValidationError("at least one episode is required");
  for (const auto& ep : episodes) detail::check_episode(ep, grid);
  rho.validate();
  const ParamMesh pm1(grid.m1, rho.a(0), rho.b(0));
  const ParamMesh pm2(grid.m2, rho.a(1), rho.b(1));
  const CellMoments mom = cell_moments(rho, pm1, pm2, grid.cell_order, with_gradient);
  const DiscreteSystem sys = assemble(rho, grid, &mom);
  const DiscreteTimeOps ops(sys);
  std::vector<detail::CellSensitivity> sens;
  if (with_gradient) sens = detail::q1_sensitivities(sys, ops);

  std::vector<detail::EpisodeTerms> terms(episodes.size());
  parallel_for(
      episodes.size(),
      [&](std::size_t i) {
        terms[i] = detail::episode_terms(ops, with_gradient ? &sens : nullptr, episodes[i]);
      },
      threads);

  Evaluation ev;
  const int cells = sys.cells();
  Eigen::VectorXd g_mass = Eigen::VectorXd::Zero(cells);
  Eigen::VectorXd g_q1 = Eigen::VectorXd::Zero(cells);
  Eigen::VectorXd g_q2 = Eigen::VectorXd::Zero(cells);
  for (auto& t : terms) {
    ev.cost += t.cost;
    ev.residuals.push_back(std::move(t.residual));
    if (with_gradient) {
      g_mass += t.g_mass;
      g_q1 += t.g_q1;
      g_q2 += t.g_q2;
    }
  }
  if (!with_gradient) return ev;

  auto contract = [&](const Eigen::MatrixXd& dp, const Eigen::MatrixXd& dq1,
                      const Eigen::MatrixXd& dq2) {
    return g_mass.dot(flatten_cells(dp)) + g_q1.dot(flatten_cells(dq1)) +
           g_q2.dot(flatten_cells(dq2));
  };
  ev.gradient = Eigen::VectorXd::Zero(include_lower ? 9 : 7);
  const int shape_slot[BivariateNormal::kShapeCount] = {kMu1, kMu2, kL11, kL21, kL22};
  for (int s = 0; s < BivariateNormal::kShapeCount; ++s) {
    ev.gradient(shape_slot[s]) = contract(mom.d_mass[s], mom.d_mean_q1[s], mom.d_mean_q2[s]);
  }

  // Support bounds move the integration domain; differentiate the cell
  // quantities by central differences at a fixed quadrature order.
  auto support_derivative = [&](bool upper, int axis) {
    const double base = upper ? rho.b(axis) : rho.a(axis);
    const double h = 1e-6 * std::max(1.0, std::abs(base));
    auto moved = [&](double delta) {
      PopulationParams r = rho;
      (upper ? r.b : r.a)(axis) = base + delta;
      const ParamMesh q1(grid.m1, r.a(0), r.b(0));
      const ParamMesh q2(grid.m2, r.a(1), r.b(1));
      return cell_moments(r, q1, q2, mom.order, false);
    };
    const bool one_sided = !upper && base - h < 0.0;
    const CellMoments plus = moved(h);
    const CellMoments minus = one_sided ? mom : moved(-h);
    const double width = one_sided ? h : 2.0 * h;
    return contract((plus.mass - minus.mass) / width, (plus.mean_q1 - minus.mean_q1) / width,
                    (plus.mean_q2 - minus.mean_q2) / width);
  };
  ev.gradient(kB1) = support_derivative(true, 0);
  ev.gradient(kB2) = support_derivative(true, 1);
  if (include_lower) {
    ev.gradient(kA1) = support_derivative(false, 0);
    ev.gradient(kA2) = support_derivative(false, 1);
  }
  return ev;
}

inline double cost(const PopulationParams& rho, const std::vector<GridEpisode>& episodes,
                   const DiscretizationGrid& grid) {
  return evaluate(rho, episodes, grid, false).cost;
}

inline Eigen::VectorXd gradient(const PopulationParams& rho,
                                const std::vector<GridEpisode>& episodes,
                                const DiscretizationGrid& grid, bool include_lower = false) {
  return evaluate(rho, episodes, grid, true, include_lower).gradient;
}

/// Least-squares fit of a single episode with the deterministic model.
struct DeterministicFit {
  Eigen::Vector2d q;
  double cost = 0.0;
  bool at_boundary = false;  ///< optimum on the edge of (0, q_max]^2
};

inline double deterministic_cost(const Eigen::Vector2d& q, const GridEpisode& ep,
                                 const DiscretizationGrid& grid) {
  const DiscreteTimeOps ops(deterministic_system(q(0), q(1), grid.n, grid.model_step()));
  return detail::observed_residual(ep, simulate(ops, ep.u)).squaredNorm();
}

inline DeterministicFit fit_episode_deterministic(const GridEpisode& ep,
                                                  const DiscretizationGrid& grid,
                                                  double q_max = 5.0) {
  detail::check_episode(ep, grid);
  const double q_min = 1e-6;
  const Eigen::Vector2d lo(q_min, q_min), hi(q_max, q_max);
  auto f = [&](const Eigen::VectorXd& q) {
    try {
      return deterministic_cost(q, ep, grid);
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  optim::NelderMeadOptions opt;
  opt.xtol = 1e-10;
  opt.ftol = 1e-16;
  opt.max_evals = 3000;

  DeterministicFit best;
  best.cost = std::numeric_limits<double>::infinity();
  bool improved = false;
  const double starts[] = {0.25, 0.5, 1.0};
  for (double s1 : starts) {
    for (double s2 : starts) {
      const Eigen::Vector2d x0(s1, s2);
      std::vector<Eigen::VectorXd> simplex = {x0, x0 + Eigen::Vector2d(0.5 * s1, 0.0),
                                              x0 + Eigen::Vector2d(0.0, 0.5 * s2)};
      const double f0 = f(x0);
      optim::NelderMeadResult r = optim::nelder_mead(f, simplex, lo, hi, opt);
      // One restart from the optimum guards against premature collapse.
      const Eigen::VectorXd x1 = r.x;
      simplex = {x1, x1 + Eigen::Vector2d(0.05 * std::max(x1(0), 1e-3), 0.0),
                 x1 + Eigen::Vector2d(0.0, 0.05 * std::max(x1(1), 1e-3))};
      const optim::NelderMeadResult r2 = optim::nelder_mead(f, simplex, lo, hi, opt);
      if (r2.f <= r.f) r = r2;
      if (r.f < f0) improved = true;
      if (r.f < best.cost) {
        best.cost = r.f;
        best.q = r.x;
      }
    }
  }
  if (!improved && !(best.cost == 0.0)) {
    std::ostringstream msg;
    msg << "deterministic fit of episode '" << ep.id << "' made no progress from any start"
        << " (best cost " << best.cost << ")";
    throw FitError(msg.str());
  }
  const double tol = 1e-4;
  best.at_boundary = (best.q.array() <= q_min + tol).any() || (best.q.array() >= q_max - tol).any();
  return best;
}

namespace detail {

inline bool near_singular(const Eigen::Matrix2d& cov) {
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov);
  const double lmin = eig.eigenvalues()(0), lmax = eig.eigenvalues()(1);
  return lmin <= 1e-8 + 1e-6 * lmax;
}

inline Eigen::Matrix2d sample_covariance(const std::vector<Eigen::Vector2d>& qs) {
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& q : qs) mean += q;
  mean /= static_cast<double>(qs.size());
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& q : qs) cov += (q - mean) * (q - mean).transpose();
  return cov / static_cast<double>(qs.size() - 1);
}

}  // namespace detail

/// True when the per-episode estimates carry no usable spread information.
inline bool spread_is_degenerate(const std::vector<Eigen::Vector2d>& qs) {
  return qs.size() < 2 || detail::near_singular(detail::sample_covariance(qs));
}

/// Replaces the covariance of `guess` by diag((cv * mu)^2) and refreshes the
/// upper support bound with the 4-sigma rule.
inline PopulationParams widen(PopulationParams guess, const std::vector<Eigen::Vector2d>& qs,
                              double cv) {
  if (!(cv > 0.0)) throw ParameterError("coefficient of variation must be positive");
  guess.sigma.setZero();
  for (int i = 0; i < 2; ++i) {
    const double sd = cv * std::abs(guess.mu(i));
    guess.sigma(i, i) = std::max(sd * sd, 1e-4);
    double hi = guess.mu(i) + 4.0 * std::sqrt(guess.sigma(i, i));
    for (const auto& q : qs) hi = std::max(hi, q(i));
    guess.b(i) = std::max(hi, guess.a(i) + 1e-3);
  }
  return guess;
}

/// Starting distribution from per-episode deterministic estimates: sample
/// mean and covariance, support [0, mu + 4 sd] widened to cover every estimate.
inline PopulationParams initial_guess(const std::vector<Eigen::Vector2d>& qs) {
  if (qs.size() < 2) {
    throw FitError("an initial guess needs at least two episodes; supply an initial distribution");
  }
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& q : qs) mean += q;
  mean /= static_cast<double>(qs.size());
  Eigen::Matrix2d cov = detail::sample_covariance(qs);
  if (detail::near_singular(cov)) cov += 1e-4 * Eigen::Matrix2d::Identity();
  PopulationParams p;
  p.a.setZero();
  p.mu = mean;
  p.sigma = cov;
  for (int i = 0; i < 2; ++i) {
    double hi = mean(i) + 4.0 * std::sqrt(cov(i, i));
    for (const auto& q : qs) hi = std::max(hi, q(i));
    p.b(i) = std::max(hi, p.a(i) + 1e-3);
  }
  return p;
}

struct FitOptions {
  bool fix_lower = true;
  int max_iter = 500;
  double gtol = 1e-6;
  double support_gap = 1e-3;  ///< b_i >= a_i + gap
  double chol_floor = 1e-6;   ///< lower bound on the Cholesky diagonal
  double degenerate_cv = 0.3;  ///< spread used when the deterministic estimates coincide
  unsigned threads = 0;
  std::function<void(const optim::BfgsIteration&)> log;
};

struct FitResult {
  PopulationParams rho_star;
  double cost = 0.0;
  double initial_cost = 0.0;
  double gradient_norm = 0.0;
  std::vector<Eigen::VectorXd> per_episode_residuals;
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;
};

/// Fits the distribution parameters to training episodes by projected BFGS
/// over theta, starting from `init`.
inline FitResult fit_population(const std::vector<GridEpisode>& episodes,
                                const DiscretizationGrid& grid, const PopulationParams& init,
                                const FitOptions& opt = {}) {
  if (episodes.empty()) throw ValidationError("at least one training episode is required");
  init.validate();
  const bool free_lower = !opt.fix_lower;
  const Eigen::Vector2d fixed_a = init.a;
  const Eigen::VectorXd x0 = to_theta(init, free_lower);
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(x0.size(), -inf);
  Eigen::VectorXd hi = Eigen::VectorXd::Constant(x0.size(), inf);
  lo(kL11) = opt.chol_floor;
  lo(kL22) = opt.chol_floor;
  if (free_lower) {
    lo(kA1) = 0.0;
    lo(kA2) = 0.0;
    lo(kB1) = opt.support_gap;
    lo(kB2) = opt.support_gap;
  } else {
    lo(kB1) = fixed_a(0) + opt.support_gap;
    lo(kB2) = fixed_a(1) + opt.support_gap;
  }

  // The optimiser sees the cost divided by the energy of the observed TAC,
  // which makes the stopping rule independent of the measurement units.
  double energy = 0.0;
  for (const auto& ep : episodes) {
    for (int k : ep.observed) energy += ep.y(k) * ep.y(k);
  }
  const double scale = energy > 0.0 ? 1.0 / energy : 1.0;
  auto fg = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    try {
      const PopulationParams rho = from_theta(x, fixed_a);
      if (free_lower && ((rho.b - rho.a).array() < opt.support_gap).any()) return inf;
      const Evaluation ev = evaluate(rho, episodes, grid, true, free_lower, opt.threads);
      g = scale * ev.gradient;
      return std::isfinite(ev.cost) && g.allFinite() ? scale * ev.cost : inf;
    } catch (const Error&) {
      return inf;
    }
  };
  optim::BfgsOptions bo;
  bo.max_iter = opt.max_iter;
  bo.gtol = opt.gtol;
  std::function<void(const optim::BfgsIteration&)> log;
  if (opt.log) {
    log = [&](const optim::BfgsIteration& it) {
      optim::BfgsIteration raw = it;
      raw.f = it.f / scale;
      raw.projected_gradient_norm = it.projected_gradient_norm / scale;
      opt.log(raw);
    };
  }
  const optim::BfgsResult r = optim::projected_bfgs(fg, x0, lo, hi, bo, log);

  FitResult out;
  out.rho_star = from_theta(r.x, fixed_a);
  const Evaluation ev = evaluate(out.rho_star, episodes, grid, false, false, opt.threads);
  out.cost = ev.cost;
  out.per_episode_residuals = ev.residuals;
  out.initial_cost = r.history.front() / scale;
  out.gradient_norm = r.projected_gradient_norm / scale;
  out.iterations = r.iterations;
  out.converged = r.converged;
  out.history = r.history;
  for (double& h : out.history) h /= scale;
  return out;
}

/// Fit with the initial distribution built from per-episode deterministic fits.
inline FitResult fit_population(const std::vector<GridEpisode>& episodes,
                                const DiscretizationGrid& grid, const FitOptions& opt = {}) {
  std::vector<Eigen::Vector2d> qs;
  for (const auto& ep : episodes) qs.push_back(fit_episode_deterministic(ep, grid).q);
  PopulationParams init;
  if (qs.size() < 2) {
    init.a.setZero();
    init.mu = qs.front();
    init = widen(init, qs, opt.degenerate_cv);
  } else {
    init = initial_guess(qs);
    if (spread_is_degenerate(qs)) init = widen(init, qs, opt.degenerate_cv);
  }
  return fit_population(episodes, grid, init, opt);
}

}  // namespace tacbrac
