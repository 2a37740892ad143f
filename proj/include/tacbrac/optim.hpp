#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "tacbrac/error.hpp"

namespace tacbrac::optim {

inline Eigen::VectorXd project(const Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                               const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

struct NelderMeadOptions {
  int max_evals = 2000;
  double ftol = 1e-12;  ///< spread of simplex values (relative to 1 + |f_best|)
  double xtol = 1e-9;   ///< simplex diameter
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int evaluations = 0;
  bool converged = false;
  bool degenerate = false;  ///< the simplex collapsed onto a lower-dimensional set
};

/// Nelder-Mead with trial points projected into the box [lo, hi].
/// `simplex` must hold dim + 1 starting vertices.
template <class F>
NelderMeadResult nelder_mead(F&& f, std::vector<Eigen::VectorXd> simplex,
                             const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                             const NelderMeadOptions& opt = {}) {
  const std::size_t dim = simplex.front().size();
  if (simplex.size() != dim + 1) throw DomainError("simplex needs dim + 1 vertices");
  NelderMeadResult res;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++res.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };
  std::vector<double> fv(dim + 1);
  for (std::size_t i = 0; i <= dim; ++i) {
    simplex[i] = project(simplex[i], lo, hi);
    fv[i] = eval(simplex[i]);
  }
  std::vector<std::size_t> order(dim + 1);
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
    std::vector<Eigen::VectorXd> s2(dim + 1);
    std::vector<double> f2(dim + 1);
    for (std::size_t i = 0; i <= dim; ++i) {
      s2[i] = simplex[order[i]];
      f2[i] = fv[order[i]];
    }
    simplex.swap(s2);
    fv.swap(f2);
  };

  while (res.evaluations < opt.max_evals) {
    sort_simplex();
    double diameter = 0.0;
    for (std::size_t i = 1; i <= dim; ++i) diameter = std::max(diameter, (simplex[i] - simplex[0]).norm());
    const double spread = fv[dim] - fv[0];
    if (diameter <= opt.xtol ||
        (std::isfinite(spread) && spread <= opt.ftol * (1.0 + std::abs(fv[0])) && diameter <= 1e3 * opt.xtol)) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(dim);
    for (std::size_t i = 0; i < dim; ++i) centroid += simplex[i];
    centroid /= static_cast<double>(dim);

    const Eigen::VectorXd xr = project(centroid + (centroid - simplex[dim]), lo, hi);
    const double fr = eval(xr);
    if (fr < fv[0]) {
      const Eigen::VectorXd xe = project(centroid + 2.0 * (centroid - simplex[dim]), lo, hi);
      const double fe = eval(xe);
      if (fe < fr) {
        simplex[dim] = xe;
        fv[dim] = fe;
      } else {
        simplex[dim] = xr;
        fv[dim] = fr;
      }
      continue;
    }
    if (fr < fv[dim - 1]) {
      simplex[dim] = xr;
      fv[dim] = fr;
      continue;
    }
    const bool outside = fr < fv[dim];
    const Eigen::VectorXd xc = outside ? Eigen::VectorXd(project(centroid + 0.5 * (xr - centroid), lo, hi))
                                       : Eigen::VectorXd(centroid + 0.5 * (simplex[dim] - centroid));
    const double fc = eval(xc);
    if (fc < (outside ? fr : fv[dim])) {
      simplex[dim] = xc;
      fv[dim] = fc;
      continue;
    }
    for (std::size_t i = 1; i <= dim; ++i) {
      simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0]);
      fv[i] = eval(simplex[i]);
    }
  }
  sort_simplex();

  // Degeneracy: the edge vectors from the best vertex lost rank.
  Eigen::MatrixXd edges(dim, dim);
  for (std::size_t i = 1; i <= dim; ++i) edges.col(i - 1) = simplex[i] - simplex[0];
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(edges);
  const auto& sv = svd.singularValues();
  res.degenerate = !res.converged && sv(0) > 0.0 && sv(dim - 1) < 1e-10 * sv(0);
  res.x = simplex[0];
  res.f = fv[0];
  return res;
}

struct BfgsOptions {
  int max_iter = 500;
  double gtol = 1e-6;  ///< stop when |projected gradient| <= gtol (1 + f)
  int max_backtracks = 40;
};

struct BfgsIteration {
  int iteration;
  double f;
  double projected_gradient_norm;
  double step;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd gradient;
  double projected_gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;  ///< f at every accepted iterate, starting with x0
};

inline double projected_gradient_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                                      const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return (project(x - g, lo, hi) - x).norm();
}

/// Projected quasi-Newton method for box constraints. `fg(x, g)` returns the
/// objective and writes the gradient; a non-finite value marks an infeasible
/// trial point and makes the line search back off.
template <class FG>
BfgsResult projected_bfgs(FG&& fg, const Eigen::VectorXd& x0, const Eigen::VectorXd& lo,
                          const Eigen::VectorXd& hi, const BfgsOptions& opt = {},
                          const std::function<void(const BfgsIteration&)>& log = {}) {
  const Eigen::Index dim = x0.size();
  BfgsResult res;
  Eigen::VectorXd x = project(x0, lo, hi);
  Eigen::VectorXd g(dim);
  double f = fg(x, g);
  if (!std::isfinite(f)) throw FitError("objective is not finite at the initial point");
  res.history.push_back(f);
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(dim, dim);
  bool fresh = true;
  double last_step = 0.0;

  for (int it = 0;; ++it) {
    const double pg = projected_gradient_norm(x, g, lo, hi);
    if (log) log({it, f, pg, last_step});
    res.iterations = it;
    if (pg <= opt.gtol * (1.0 + std::abs(f))) {
      res.converged = true;
      break;
    }
    if (it >= opt.max_iter) break;

    // Variables pinned at a bound with the gradient pushing outwards stay fixed.
    std::vector<bool> active(dim, false);
    const double eps = 1e-12;
    for (Eigen::Index i = 0; i < dim; ++i) {
      active[i] = (x(i) <= lo(i) + eps * (1.0 + std::abs(lo(i))) && g(i) > 0.0) ||
                  (x(i) >= hi(i) - eps * (1.0 + std::abs(hi(i))) && g(i) < 0.0);
    }
    auto direction = [&](const Eigen::MatrixXd& hm) {
      Eigen::VectorXd gf = g;
      for (Eigen::Index i = 0; i < dim; ++i) {
        if (active[i]) gf(i) = 0.0;
      }
      Eigen::VectorXd d = -hm * gf;
      for (Eigen::Index i = 0; i < dim; ++i) {
        if (active[i]) d(i) = 0.0;
      }
      return d;
    };
    Eigen::VectorXd d = direction(h);
    if (!(g.dot(d) < 0.0)) {
      h.setIdentity();
      fresh = true;
      d = direction(h);
    }

    bool accepted = false;
    Eigen::VectorXd xn, gn(dim);
    double fn = 0.0;
    double alpha = 1.0;
    for (int bt = 0; bt < opt.max_backtracks; ++bt, alpha *= 0.5) {
      xn = project(x + alpha * d, lo, hi);
      if ((xn - x).norm() == 0.0) break;
      fn = fg(xn, gn);
      if (std::isfinite(fn) && fn <= f + 1e-4 * g.dot(xn - x)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (fresh) break;  // steepest descent made no progress either
      h.setIdentity();
      fresh = true;
      continue;
    }
    const Eigen::VectorXd s = xn - x;
    const Eigen::VectorXd y = gn - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (fresh) h = Eigen::MatrixXd::Identity(dim, dim) * (sy / y.dot(y));
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(dim, dim);
      h = (eye - rho * s * y.transpose()) * h * (eye - rho * y * s.transpose()) + rho * s * s.transpose();
      fresh = false;
    }
    last_step = s.norm();
    x = xn;
    g = gn;
    f = fn;
    res.history.push_back(f);
  }
  res.x = x;
  res.f = f;
  res.gradient = g;
  res.projected_gradient_norm = projected_gradient_norm(x, g, lo, hi);
  return res;
}

}  // namespace tacbrac::optim
