#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tacbrac/data_io.hpp"
#include "tacbrac/density.hpp"
#include "tacbrac/error.hpp"
#include "tacbrac/forward_model.hpp"
#include "tacbrac/grid_basis.hpp"
#include "tacbrac/nnls.hpp"
#include "tacbrac/optim.hpp"
#include "tacbrac/parallel.hpp"

namespace tacbrac {

/// tq: the input is a function of time and of the parameter cell.
/// scalar: the input depends on time only.
enum class Variant { tq, scalar };

inline Variant parse_variant(const std::string& s) {
  if (s == "tq") return Variant::tq;
  if (s == "scalar") return Variant::scalar;
  throw ConfigError("variant must be 'tq' or 'scalar', got '" + s + "'");
}

/// Symmetric square root of a symmetric positive semidefinite matrix;
/// negative eigenvalues from rounding are clipped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

/// Regularised nonnegative least-squares problem for the input coefficients.
/// Unknowns are ordered (temporal node, cell) with the temporal node fastest.
struct DeconvolutionProblem {
  Variant variant = Variant::tq;
  int m = 0;      ///< temporal basis count
  int cells = 1;  ///< parameter cells (1 for the scalar variant)
  double tau = 1.0;
  Eigen::MatrixXd H;        ///< K x (m cells)
  Eigen::MatrixXd hth;      ///< H'H, cached by build_problem
  Eigen::MatrixXd g0, g1;   ///< temporal Gram matrices, m x m
  Eigen::MatrixXd sample;   ///< K x m, basis values at the input instants
  Eigen::VectorXd weights;  ///< cell masses (a single 1 for the scalar variant)
  Eigen::VectorXd yhat;     ///< TAC y_1..y_K
  double r1 = 0.0;
  double r2 = 0.0;

  int steps() const { return static_cast<int>(yhat.size()); }
  int unknowns() const { return m * cells; }

  Eigen::MatrixXd Q1() const { return kron_weights(g0); }
  Eigen::MatrixXd Q2() const { return kron_weights(g1); }

  /// (r1 Q1 + r2 Q2)^(1/2) using the block structure diag(p) (x) G.
  Eigen::MatrixXd regularizer_sqrt() const {
    if (r1 < 0.0 || r2 < 0.0) throw DomainError("regularisation weights must be >= 0");
    const Eigen::MatrixXd root = psd_sqrt(r1 * g0 + r2 * g1);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(unknowns(), unknowns());
    for (int c = 0; c < cells; ++c) {
      out.block(c * m, c * m, m, m) = std::sqrt(std::max(weights(c), 0.0)) * root;
    }
    return out;
  }

  /// r1 Q1 + r2 Q2.
  Eigen::MatrixXd regularizer() const {
    if (r1 < 0.0 || r2 < 0.0) throw DomainError("regularisation weights must be >= 0");
    return kron_weights(r1 * g0 + r2 * g1);
  }

  /// Normal matrix of the stacked system: H'H + r1 Q1 + r2 Q2.
  Eigen::MatrixXd normal_matrix() const {
    const Eigen::MatrixXd base = hth.rows() == unknowns() ? hth : Eigen::MatrixXd(H.transpose() * H);
    return base + regularizer();
  }

  Eigen::MatrixXd stacked_matrix() const {
    Eigen::MatrixXd a(steps() + unknowns(), unknowns());
    a.topRows(steps()) = H;
    a.bottomRows(unknowns()) = regularizer_sqrt();
    return a;
  }

  Eigen::VectorXd stacked_rhs() const {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(steps() + unknowns());
    b.head(steps()) = yhat;
    return b;
  }

  /// ||H x - yhat||^2 + x'(r1 Q1 + r2 Q2) x.
  double objective(const Eigen::VectorXd& x) const {
    const Eigen::VectorXd fit = H * x - yhat;
    return fit.squaredNorm() + x.dot(r1 * (Q1() * x) + r2 * (Q2() * x));
  }

  /// Input values at the K instants, one column per cell.
  Eigen::MatrixXd input_on_cells(const Eigen::VectorXd& x) const {
    Eigen::MatrixXd out(steps(), cells);
    for (int c = 0; c < cells; ++c) out.col(c) = sample * x.segment(c * m, m);
    return out;
  }

 private:
  Eigen::MatrixXd kron_weights(const Eigen::MatrixXd& g) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(unknowns(), unknowns());
    for (int c = 0; c < cells; ++c) out.block(c * m, c * m, m, m) = weights(c) * g;
    return out;
  }
};

namespace detail {

/// Columns of T S where T is the lower-triangular Toeplitz matrix of the kernel.
inline Eigen::MatrixXd toeplitz_times(const Eigen::VectorXd& kernel, const Eigen::MatrixXd& s) {
  const Eigen::Index steps = s.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(steps, s.cols());
  for (Eigen::Index col = 0; col < s.cols(); ++col) {
    for (Eigen::Index j = 0; j < steps; ++j) {
      const double v = s(j, col);
      if (v == 0.0) continue;
      out.col(col).tail(steps - j) += v * kernel.head(steps - j);
    }
  }
  return out;
}

}  // namespace detail

/// Builds the problem for TAC samples y_1..y_K from a discretised model.
inline DeconvolutionProblem build_problem(const DiscreteTimeOps& ops,
                                          const DiscretizationGrid& grid,
                                          const Eigen::VectorXd& tac, double r1, double r2,
                                          Variant variant) {
  const int steps = static_cast<int>(tac.size());
  if (steps < 1) throw InputError("deconvolution needs at least one TAC sample");
  if (r1 < 0.0 || r2 < 0.0) throw DomainError("regularisation weights must be >= 0");
  const Kernels k = impulse_kernels(ops, steps);
  if (k.cells.cwiseAbs().maxCoeff() == 0.0) {
    throw ModelError("all impulse-response kernels vanish; the model cannot explain any TAC");
  }
  DeconvolutionProblem p;
  p.variant = variant;
  p.tau = grid.tau;
  p.m = grid.temporal_count(steps);
  const TimeMesh tm(p.m, steps, grid.tau);
  const TemporalBasis basis = temporal_basis_matrices(tm);
  p.g0 = basis.g0;
  p.g1 = basis.g1;
  p.sample = basis.sample;
  p.yhat = tac;
  p.r1 = r1;
  p.r2 = r2;
  if (variant == Variant::scalar) {
    p.cells = 1;
    p.weights = Eigen::VectorXd::Ones(1);
    p.H = detail::toeplitz_times(k.scalar, basis.sample);
  } else {
    p.cells = ops.cells();
    p.weights = ops.cell_mass();
    p.H.resize(steps, p.m * p.cells);
    for (int c = 0; c < p.cells; ++c) {
      p.H.middleCols(c * p.m, p.m) = detail::toeplitz_times(k.cells.col(c), basis.sample);
    }
  }
  p.hth.noalias() = p.H.transpose() * p.H;
  return p;
}

struct DeconvolutionResult {
  Variant variant = Variant::tq;
  Eigen::MatrixXd coeffs;      ///< m x cells
  Eigen::MatrixXd sample;      ///< K x m
  Eigen::VectorXd weights;     ///< cell masses
  Eigen::VectorXd mean_curve;  ///< E[u(t_j)], j = 0..K-1
  Eigen::VectorXd fitted_tac;  ///< y_1..y_K
  double residual = 0.0;       ///< value of the regularised objective
  bool converged = true;       ///< nnls finished within its iteration cap
  double tau = 1.0;

  int steps() const { return static_cast<int>(mean_curve.size()); }

  /// Input curve for parameter cell c.
  Eigen::VectorXd curve(int c) const { return sample * coeffs.col(c); }
};

inline DeconvolutionResult deconvolve(const DeconvolutionProblem& p) {
  // The stacked system's normal equations; the square-root block enters only
  // through its square r1 Q1 + r2 Q2.
  const NnlsResult sol = nnls_normal(p.normal_matrix(), p.H.transpose() * p.yhat);
  DeconvolutionResult r;
  r.variant = p.variant;
  r.coeffs = Eigen::Map<const Eigen::MatrixXd>(sol.x.data(), p.m, p.cells);
  r.sample = p.sample;
  r.weights = p.weights;
  r.mean_curve = p.input_on_cells(sol.x) * p.weights;
  r.fitted_tac = p.H * sol.x;
  r.residual = p.objective(sol.x);
  r.converged = sol.converged;
  r.tau = p.tau;
  return r;
}

/// Discrete model used for deconvolution with distribution rho.
inline DiscreteTimeOps deconvolution_model(const PopulationParams& rho,
                                           const DiscretizationGrid& grid) {
  return DiscreteTimeOps(assemble(rho, grid));
}

struct RegularizationOptions {
  double log_lo = -6.0;
  double log_hi = 2.0;
  std::vector<Eigen::Vector2d> design = {{-3.0, -3.0}, {0.0, -3.0}, {-3.0, 0.0}, {0.0, 0.0}};
  int max_evals = 80;
  double xtol = 1e-2;
  unsigned threads = 0;
};

struct RegularizationResult {
  double r1 = 0.0;
  double r2 = 0.0;
  Eigen::Vector2d log_r = Eigen::Vector2d::Zero();
  double objective = 0.0;
  std::vector<double> design_objectives;
  int evaluations = 0;
  bool converged = false;
  bool degenerate = false;
};

/// Weight from its base-10 logarithm; the bottom of the search box means 0.
inline double weight_from_log(double l, double log_lo = -6.0) {
  return l <= log_lo ? 0.0 : std::pow(10.0, l);
}

/// Chooses (r1, r2) by Nelder-Mead in log space, minimising over the
/// training episodes the squared misfit between the mean deconvolved BrAC and
/// the measured BrAC plus the squared misfit of the refitted TAC.
inline RegularizationResult select_regularization(const std::vector<GridEpisode>& training,
                                                  const PopulationParams& rho,
                                                  const DiscretizationGrid& grid,
                                                  Variant variant,
                                                  const RegularizationOptions& opt = {}) {
  if (training.empty()) throw ValidationError("regularisation selection needs training episodes");
  for (const auto& ep : training) {
    if (ep.u.size() == 0 || ep.y.size() == 0) {
      throw ValidationError("episode '" + ep.id + "' needs both BrAC and TAC for training");
    }
  }
  const DiscreteTimeOps ops = deconvolution_model(rho, grid);
  std::vector<DeconvolutionProblem> problems;
  problems.reserve(training.size());
  for (const auto& ep : training) problems.push_back(build_problem(ops, grid, ep.y, 0, 0, variant));

  RegularizationResult out;
  auto objective = [&](const Eigen::VectorXd& l) {
    ++out.evaluations;
    std::vector<double> parts(problems.size());
    parallel_for(
        problems.size(),
        [&](std::size_t i) {
          DeconvolutionProblem p = problems[i];
          p.r1 = weight_from_log(l(0), opt.log_lo);
          p.r2 = weight_from_log(l(1), opt.log_lo);
          const DeconvolutionResult r = deconvolve(p);
          parts[i] = (r.mean_curve - training[i].u).squaredNorm() +
                     (r.fitted_tac - training[i].y).squaredNorm();
        },
        opt.threads);
    double s = 0.0;
    for (double v : parts) s += v;
    return s;
  };

  const Eigen::VectorXd lo = Eigen::Vector2d::Constant(opt.log_lo);
  const Eigen::VectorXd hi = Eigen::Vector2d::Constant(opt.log_hi);
  std::vector<std::pair<double, Eigen::VectorXd>> design;
  for (const auto& d : opt.design) {
    const Eigen::VectorXd x = optim::project(d, lo, hi);
    const double f = objective(x);
    out.design_objectives.push_back(f);
    design.emplace_back(f, x);
  }
  std::stable_sort(design.begin(), design.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Eigen::VectorXd> simplex;
  for (std::size_t i = 0; i < 3 && i < design.size(); ++i) simplex.push_back(design[i].second);
  if (simplex.size() < 3) throw ConfigError("the regularisation design needs at least 3 points");

  optim::NelderMeadOptions nm;
  nm.max_evals = opt.max_evals;
  nm.xtol = opt.xtol;
  nm.ftol = 1e-10;
  optim::NelderMeadResult r = optim::nelder_mead(objective, simplex, lo, hi, nm);
  if (r.degenerate) {
    const Eigen::VectorXd c = r.x;
    simplex = {c, c + Eigen::Vector2d(0.7, 0.1), c + Eigen::Vector2d(-0.2, 0.6)};
    const optim::NelderMeadResult again = optim::nelder_mead(objective, simplex, lo, hi, nm);
    if (again.f <= r.f) r = again;
    out.degenerate = again.degenerate;
  }
  Eigen::VectorXd best = r.x;
  double fbest = r.f;
  if (design.front().first < fbest) {
    fbest = design.front().first;
    best = design.front().second;
  }
  out.log_r = best;
  out.r1 = weight_from_log(best(0), opt.log_lo);
  out.r2 = weight_from_log(best(1), opt.log_lo);
  out.objective = fbest;
  out.converged = r.converged;
  return out;
}

}  // namespace tacbrac
