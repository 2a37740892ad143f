#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "tacbrac/error.hpp"

namespace tacbrac {

/// Uniform mesh {j/n} on the spatial interval [0, 1].
class SpatialMesh {
 public:
  explicit SpatialMesh(int n) : n_(n) {
    if (n < 1) throw DomainError("spatial mesh needs n >= 1, got " + std::to_string(n));
  }

  int n() const { return n_; }
  int size() const { return n_ + 1; }
  double node(int j) const { return j == n_ ? 1.0 : static_cast<double>(j) / n_; }

  std::vector<double> nodes() const {
    std::vector<double> out(n_ + 1);
    for (int j = 0; j <= n_; ++j) out[j] = node(j);
    return out;
  }

 private:
  int n_;
};

/// Uniform partition of [lo, hi] into `cells` intervals; carries the
/// piecewise-constant basis on one parameter axis.
class ParamMesh {
 public:
  ParamMesh(int cells, double lo, double hi) : cells_(cells), lo_(lo), hi_(hi) {
    if (cells < 1) throw DomainError("parameter mesh needs at least one cell");
    if (!(lo >= 0.0) || !(hi > lo)) {
      throw DomainError("parameter mesh needs 0 <= lo < hi, got [" + std::to_string(lo) +
                        ", " + std::to_string(hi) + "]");
    }
  }

  int cells() const { return cells_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  double width() const { return (hi_ - lo_) / cells_; }

  double edge(int j) const {
    if (j == cells_) return hi_;
    return lo_ + (hi_ - lo_) * static_cast<double>(j) / cells_;
  }

  std::vector<double> edges() const {
    std::vector<double> out(cells_ + 1);
    for (int j = 0; j <= cells_; ++j) out[j] = edge(j);
    return out;
  }

  /// Index of the cell containing x; the right end point belongs to the last
  /// cell. Returns -1 outside [lo, hi].
  int locate(double x) const {
    if (x < lo_ || x > hi_) return -1;
    int j = static_cast<int>(std::floor((x - lo_) / (hi_ - lo_) * cells_));
    if (j >= cells_) j = cells_ - 1;
    if (j < 0) j = 0;
    return j;
  }

 private:
  int cells_;
  double lo_;
  double hi_;
};

/// Temporal mesh: `m` linear B-spline nodes spread uniformly over [0, T],
/// T = steps * tau. Sample k of the zero-order-hold input sits at t = k * tau.
class TimeMesh {
 public:
  TimeMesh(int m, int steps, double tau = 1.0) : m_(m), steps_(steps), tau_(tau) {
    if (m < 2) throw DomainError("temporal basis needs m >= 2");
    if (steps < 1) throw DomainError("time horizon needs at least one step");
    if (!(tau > 0.0)) throw DomainError("sampling interval must be positive");
  }

  /// Default basis count: six functions per hour of data (rounded up).
  static int default_basis_count(int steps, double tau) {
    const double hours = steps * tau / 60.0;
    return std::max(2, static_cast<int>(std::ceil(6.0 * hours - 1e-9)));
  }

  int m() const { return m_; }
  int steps() const { return steps_; }
  double tau() const { return tau_; }
  double horizon() const { return steps_ * tau_; }
  double spacing() const { return horizon() / (m_ - 1); }
  double node(int i) const { return i == m_ - 1 ? horizon() : i * spacing(); }

  /// Value of the i-th hat function at time t.
  double eval(int i, double t) const {
    if (i < 0 || i >= m_) throw DomainError("temporal basis index out of range");
    const double h = spacing();
    const double d = std::abs(t - node(i)) / h;
    if (t < 0.0 || t > horizon()) return 0.0;
    return d >= 1.0 ? 0.0 : 1.0 - d;
  }

 private:
  int m_;
  int steps_;
  double tau_;
};

/// Flattening of the tensor multi-indices (fast, j1, j2): the first
/// component varies fastest, then j1, then j2. Used for both the state index
/// (spatial node, j1, j2) and the input index (temporal node, j1, j2).
struct TensorIndex {
  int fast;  ///< extent of the fastest index (n+1 or m)
  int m1;
  int m2;

  int size() const { return fast * m1 * m2; }
  int cells() const { return m1 * m2; }
  int cell(int j1, int j2) const { return j1 + m1 * j2; }

  int flatten(int j, int j1, int j2) const {
    if (j < 0 || j >= fast || j1 < 0 || j1 >= m1 || j2 < 0 || j2 >= m2) {
      throw DomainError("tensor index out of range");
    }
    return j + fast * (j1 + m1 * j2);
  }

  struct Triple {
    int j, j1, j2;
  };

  Triple unflatten(int flat) const {
    if (flat < 0 || flat >= size()) throw DomainError("flat index out of range");
    Triple t{};
    t.j = flat % fast;
    const int c = flat / fast;
    t.j1 = c % m1;
    t.j2 = c / m1;
    return t;
  }
};

/// Hat function centred at node j of the spatial mesh, evaluated at eta.
inline double eval_linear_spline(const SpatialMesh& mesh, int j, double eta) {
  if (j < 0 || j > mesh.n()) {
    throw DomainError("spline index " + std::to_string(j) + " outside [0, " +
                      std::to_string(mesh.n()) + "]");
  }
  if (eta < 0.0 || eta > 1.0) return 0.0;
  const double d = std::abs(eta * mesh.n() - j);
  return d >= 1.0 ? 0.0 : 1.0 - d;
}

/// Exact Galerkin matrices of the hat basis on a uniform mesh of [0, 1].
struct Gram1d {
  Eigen::MatrixXd mass;       ///< int phi_i phi_j
  Eigen::MatrixXd stiffness;  ///< int phi_i' phi_j'
  Eigen::MatrixXd boundary0;  ///< phi_i(0) phi_j(0)
  Eigen::VectorXd trace0;     ///< phi_i(0)
  Eigen::VectorXd trace1;     ///< phi_i(1)
};

namespace detail {

// Mass and stiffness of `intervals` uniform linear elements of length h.
inline void linear_element_gram(int intervals, double h, Eigen::MatrixXd& mass,
                                Eigen::MatrixXd& stiffness) {
  const int size = intervals + 1;
  mass = Eigen::MatrixXd::Zero(size, size);
  stiffness = Eigen::MatrixXd::Zero(size, size);
  for (int e = 0; e < intervals; ++e) {
    mass(e, e) += h / 3.0;
    mass(e + 1, e + 1) += h / 3.0;
    mass(e, e + 1) += h / 6.0;
    mass(e + 1, e) += h / 6.0;
    stiffness(e, e) += 1.0 / h;
    stiffness(e + 1, e + 1) += 1.0 / h;
    stiffness(e, e + 1) -= 1.0 / h;
    stiffness(e + 1, e) -= 1.0 / h;
  }
}

}  // namespace detail

inline Gram1d assemble_1d_gram(const SpatialMesh& mesh) {
  Gram1d g;
  detail::linear_element_gram(mesh.n(), 1.0 / mesh.n(), g.mass, g.stiffness);
  const int size = mesh.size();
  g.trace0 = Eigen::VectorXd::Zero(size);
  g.trace1 = Eigen::VectorXd::Zero(size);
  g.trace0(0) = 1.0;
  g.trace1(size - 1) = 1.0;
  g.boundary0 = g.trace0 * g.trace0.transpose();
  return g;
}

/// Temporal Gram matrices and the zero-order-hold sampling matrix.
struct TemporalBasis {
  Eigen::MatrixXd g0;      ///< m x m, int phi_i phi_j dt
  Eigen::MatrixXd g1;      ///< m x m, int phi_i' phi_j' dt
  Eigen::MatrixXd sample;  ///< steps x m, row k holds phi_i(k tau)
};

inline TemporalBasis temporal_basis_matrices(const TimeMesh& tm) {
  TemporalBasis out;
  detail::linear_element_gram(tm.m() - 1, tm.spacing(), out.g0, out.g1);
  out.sample = Eigen::MatrixXd::Zero(tm.steps(), tm.m());
  const double h = tm.spacing();
  for (int k = 0; k < tm.steps(); ++k) {
    const double t = k * tm.tau();
    const double s = t / h;
    int left = static_cast<int>(std::floor(s));
    if (left >= tm.m() - 1) left = tm.m() - 2;
    const double frac = s - left;
    out.sample(k, left) += 1.0 - frac;
    out.sample(k, left + 1) += frac;
  }
  return out;
}

/// Discretisation levels shared by every assembly routine.
struct DiscretizationGrid {
  int n = 4;         ///< spatial intervals
  int m1 = 4;        ///< cells along q1
  int m2 = 4;        ///< cells along q2
  double tau = 1.0;  ///< sampling interval, minutes
  int m = 0;         ///< temporal basis count; 0 selects six per hour of data
  int cell_order = 0;       ///< per-cell Gauss-Legendre order; 0 selects it automatically
  double time_unit = 60.0;  ///< minutes per unit of model time (rates q are per hour)

  /// Sampling interval expressed in model time units.
  double model_step() const { return tau / time_unit; }

  int cells() const { return m1 * m2; }
  int state_size() const { return (n + 1) * m1 * m2; }

  int temporal_count(int steps) const {
    return m > 0 ? m : TimeMesh::default_basis_count(steps, tau);
  }
};

}  // namespace tacbrac
