#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <cmath>
#include <sstream>
#include <vector>

#include "tacbrac/density.hpp"
#include "tacbrac/error.hpp"
#include "tacbrac/grid_basis.hpp"

namespace tacbrac {

/// Galerkin system of the population model. The test and trial functions
/// are piecewise constant in q, so every matrix is block diagonal with one
/// (n+1)-sized block per parameter cell; the blocks are kept separately and
/// the dense matrices are built on demand.
///
/// Cell c carries the probability p_c and conditional means qbar1_c, qbar2_c.
/// Block c of the mass matrix is p_c Ms, of the stiffness matrix
/// -(p_c E0 + p_c qbar1_c S), the input functional p_c qbar2_c e1 and the
/// output functional p_c e0.
class DiscreteSystem {
 public:
  DiscreteSystem(int n, double step, Eigen::VectorXd mass, Eigen::VectorXd qbar1,
                 Eigen::VectorXd qbar2, int m1 = 1, int m2 = 1)
      : mesh_(n),
        gram_(assemble_1d_gram(mesh_)),
        step_(step),
        m1_(m1),
        m2_(m2),
        p_(std::move(mass)),
        q1_(std::move(qbar1)),
        q2_(std::move(qbar2)) {
    if (!(step > 0.0)) throw DomainError("sampling step must be positive");
    if (p_.size() != q1_.size() || p_.size() != q2_.size() || p_.size() != m1 * m2) {
      throw InputError("cell vectors disagree in length");
    }
    mass_llt_.compute(gram_.mass);
    if (mass_llt_.info() != Eigen::Success) {
      throw NumericalError("spatial mass matrix is not positive definite");
    }
  }

  int n() const { return mesh_.n(); }
  int block_size() const { return mesh_.size(); }
  int cells() const { return static_cast<int>(p_.size()); }
  int m1() const { return m1_; }
  int m2() const { return m2_; }
  int state_size() const { return block_size() * cells(); }
  /// Sampling interval in model time units.
  double step() const { return step_; }

  const Gram1d& gram() const { return gram_; }
  const Eigen::LLT<Eigen::MatrixXd>& mass_llt() const { return mass_llt_; }
  const Eigen::VectorXd& cell_mass() const { return p_; }
  const Eigen::VectorXd& mean_q1() const { return q1_; }
  const Eigen::VectorXd& mean_q2() const { return q2_; }

  /// Generator block -Ms^{-1}(E0 + qbar1_c S) of cell c.
  Eigen::MatrixXd generator(int c) const {
    return -mass_llt_.solve(gram_.boundary0 + q1_(c) * gram_.stiffness);
  }

  /// Derivative of the generator block with respect to qbar1.
  Eigen::MatrixXd generator_dq1() const { return -mass_llt_.solve(gram_.stiffness); }

  /// Ms^{-1} e1, the input direction before the qbar2 gain.
  Eigen::VectorXd unit_input() const { return mass_llt_.solve(gram_.trace1); }

  Eigen::MatrixXd Mmat() const {
    return block_diag([&](int c) { return Eigen::MatrixXd(p_(c) * gram_.mass); });
  }

  Eigen::MatrixXd Kmat() const {
    return block_diag([&](int c) {
      return Eigen::MatrixXd(-p_(c) * (gram_.boundary0 + q1_(c) * gram_.stiffness));
    });
  }

  Eigen::VectorXd Bvec_scalar() const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(state_size());
    for (int c = 0; c < cells(); ++c) {
      out.segment(c * block_size(), block_size()) = p_(c) * q2_(c) * gram_.trace1;
    }
    return out;
  }

  Eigen::MatrixXd Bmat_tq() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(state_size(), cells());
    for (int c = 0; c < cells(); ++c) {
      out.block(c * block_size(), c, block_size(), 1) = p_(c) * q2_(c) * gram_.trace1;
    }
    return out;
  }

  Eigen::RowVectorXd Cvec() const {
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(state_size());
    for (int c = 0; c < cells(); ++c) {
      out.segment(c * block_size(), block_size()) = p_(c) * gram_.trace0.transpose();
    }
    return out;
  }

 private:
  template <class F>
  Eigen::MatrixXd block_diag(F&& block) const {
    const int s = block_size();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(state_size(), state_size());
    for (int c = 0; c < cells(); ++c) out.block(c * s, c * s, s, s) = block(c);
    return out;
  }

  SpatialMesh mesh_;
  Gram1d gram_;
  Eigen::LLT<Eigen::MatrixXd> mass_llt_;
  double step_;
  int m1_, m2_;
  Eigen::VectorXd p_, q1_, q2_;
};

/// Flattens an m1 x m2 matrix with j1 fastest, the cell ordering used
/// throughout.
inline Eigen::VectorXd flatten_cells(const Eigen::MatrixXd& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

/// Population system at rho: cell masses and conditional means of the
/// truncated density on the grid's parameter meshes.
inline DiscreteSystem assemble(const PopulationParams& rho, const DiscretizationGrid& grid,
                               const CellMoments* moments = nullptr) {
  const ParamMesh pm1(grid.m1, rho.a(0), rho.b(0));
  const ParamMesh pm2(grid.m2, rho.a(1), rho.b(1));
  CellMoments local;
  if (moments == nullptr) {
    local = cell_moments(rho, pm1, pm2);
    moments = &local;
  }
  return DiscreteSystem(grid.n, grid.model_step(), flatten_cells(moments->mass),
                        flatten_cells(moments->mean_q1), flatten_cells(moments->mean_q2),
                        grid.m1, grid.m2);
}

/// Single-parameter (deterministic) system at q = (q1, q2).
inline DiscreteSystem deterministic_system(double q1, double q2, int n, double step) {
  return DiscreteSystem(n, step, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Constant(1, q1),
                        Eigen::VectorXd::Constant(1, q2));
}

/// One-step operators of a cell block: Ahat = exp(A dt) and the zero-order-hold
/// input vector Bhat = A^{-1}(Ahat - I) b.
struct CellOps {
  Eigen::MatrixXd a;
  Eigen::MatrixXd ahat;
  Eigen::VectorXd beta_unit;  ///< Bhat for a unit qbar2 gain
  Eigen::VectorXd beta;       ///< qbar2 * beta_unit
  Eigen::PartialPivLU<Eigen::MatrixXd> lu;
};

namespace detail {

inline Eigen::PartialPivLU<Eigen::MatrixXd> checked_lu(const Eigen::MatrixXd& a) {
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  const double rcond = lu.rcond();
  if (!(rcond > 1e-14)) {
    std::ostringstream msg;
    msg << "generator is numerically singular (reciprocal condition number " << rcond << ")";
    throw NumericalError(msg.str());
  }
  return lu;
}

}  // namespace detail

/// Zero-order-hold discretisation of x' = A x + b u over one step dt.
/// The returned `beta` equals `beta_unit`.
inline CellOps zoh_discretize(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, double dt) {
  CellOps ops;
  ops.a = a;
  ops.ahat = (a * dt).exp();
  ops.lu = detail::checked_lu(a);
  ops.beta_unit = ops.lu.solve((ops.ahat - Eigen::MatrixXd::Identity(a.rows(), a.cols())) * b);
  ops.beta = ops.beta_unit;
  return ops;
}

/// Discrete-time population operators over one sampling interval.
class DiscreteTimeOps {
 public:
  /// `step` overrides the system's sampling interval (model time units).
  explicit DiscreteTimeOps(const DiscreteSystem& sys, double step = 0.0)
      : block_(sys.block_size()),
        step_(step > 0.0 ? step : sys.step()),
        p_(sys.cell_mass()),
        q2_(sys.mean_q2()) {
    const Eigen::VectorXd b = sys.unit_input();
    cells_.reserve(sys.cells());
    for (int c = 0; c < sys.cells(); ++c) {
      CellOps ops = zoh_discretize(sys.generator(c), b, step_);
      ops.beta = q2_(c) * ops.beta_unit;
      cells_.push_back(std::move(ops));
    }
  }

  int cells() const { return static_cast<int>(cells_.size()); }
  int block_size() const { return block_; }
  int state_size() const { return block_ * cells(); }
  double step() const { return step_; }
  const CellOps& cell(int c) const { return cells_[c]; }
  const Eigen::VectorXd& cell_mass() const { return p_; }
  const Eigen::VectorXd& mean_q2() const { return q2_; }

  Eigen::MatrixXd Ahat() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(state_size(), state_size());
    for (int c = 0; c < cells(); ++c) out.block(c * block_, c * block_, block_, block_) = cells_[c].ahat;
    return out;
  }

  Eigen::VectorXd Bhat_scalar() const {
    Eigen::VectorXd out(state_size());
    for (int c = 0; c < cells(); ++c) out.segment(c * block_, block_) = cells_[c].beta;
    return out;
  }

  Eigen::MatrixXd Bhat_tq() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(state_size(), cells());
    for (int c = 0; c < cells(); ++c) out.block(c * block_, c, block_, 1) = cells_[c].beta;
    return out;
  }

  Eigen::RowVectorXd Chat() const {
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(state_size());
    for (int c = 0; c < cells(); ++c) out(c * block_) = p_(c);
    return out;
  }

 private:
  int block_;
  double step_;
  Eigen::VectorXd p_, q2_;
  std::vector<CellOps> cells_;
};

inline DiscreteTimeOps discrete_time(const DiscreteSystem& sys, double step = 0.0) {
  return DiscreteTimeOps(sys, step);
}

/// TAC y_1..y_K from a scalar zero-order-hold input u_0..u_{K-1}, x_0 = 0.
inline Eigen::VectorXd simulate(const DiscreteTimeOps& ops, const Eigen::VectorXd& u) {
  const Eigen::Index steps = u.size();
  Eigen::VectorXd y = Eigen::VectorXd::Zero(steps);
  for (int c = 0; c < ops.cells(); ++c) {
    const CellOps& cell = ops.cell(c);
    const double w = ops.cell_mass()(c);
    if (w == 0.0) continue;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(ops.block_size());
    for (Eigen::Index k = 0; k < steps; ++k) {
      x = cell.ahat * x + cell.beta * u(k);
      y(k) += w * x(0);
    }
  }
  return y;
}

/// TAC from an input that varies over parameter cells: u is K x cells.
inline Eigen::VectorXd simulate_tq(const DiscreteTimeOps& ops, const Eigen::MatrixXd& u) {
  if (u.cols() != ops.cells()) {
    std::ostringstream msg;
    msg << "input has " << u.cols() << " columns, model has " << ops.cells() << " cells";
    throw InputError(msg.str());
  }
  const Eigen::Index steps = u.rows();
  Eigen::VectorXd y = Eigen::VectorXd::Zero(steps);
  for (int c = 0; c < ops.cells(); ++c) {
    const CellOps& cell = ops.cell(c);
    const double w = ops.cell_mass()(c);
    if (w == 0.0) continue;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(ops.block_size());
    for (Eigen::Index k = 0; k < steps; ++k) {
      x = cell.ahat * x + cell.beta * u(k, c);
      y(k) += w * x(0);
    }
  }
  return y;
}

/// Impulse-response kernels h_1..h_K. Row l-1 of `cells` holds the
/// mass-weighted per-cell kernel p_c e0' Ahat_c^{l-1} Bhat_c, so that
/// y_k = sum_j sum_c cells(k-1-j, c) u_j(c); `scalar` is the row sum.
struct Kernels {
  Eigen::MatrixXd cells;   ///< K x (m1 m2)
  Eigen::VectorXd scalar;  ///< K

  /// Riesz representer of lag l (index l-1) as a function of q on the cells.
  Eigen::VectorXd representer(int index, const Eigen::VectorXd& cell_mass) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(cells.cols());
    for (Eigen::Index c = 0; c < cells.cols(); ++c) {
      if (cell_mass(c) > 0.0) out(c) = cells(index, c) / cell_mass(c);
    }
    return out;
  }
};

/// Kernels by repeated application of Ahat' to the output functional.
inline Kernels impulse_kernels(const DiscreteTimeOps& ops, int count) {
  if (count < 1) throw DomainError("kernel count must be >= 1");
  Kernels k;
  k.cells = Eigen::MatrixXd::Zero(count, ops.cells());
  for (int c = 0; c < ops.cells(); ++c) {
    const CellOps& cell = ops.cell(c);
    const double w = ops.cell_mass()(c);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(ops.block_size());
    z(0) = w;
    const Eigen::MatrixXd at = cell.ahat.transpose();
    for (int l = 0; l < count; ++l) {
      k.cells(l, c) = z.dot(cell.beta);
      z = at * z;
    }
  }
  k.scalar = k.cells.rowwise().sum();
  return k;
}

/// Output of the convolution sum y_k = sum_{j<k} h_{k-j} u_j (scalar input).
inline Eigen::VectorXd convolve(const Kernels& k, const Eigen::VectorXd& u) {
  const Eigen::Index steps = u.size();
  if (k.scalar.size() < steps) throw InputError("not enough kernels for the input length");
  Eigen::VectorXd y = Eigen::VectorXd::Zero(steps);
  for (Eigen::Index i = 0; i < steps; ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) s += k.scalar(i - j) * u(j);
    y(i) = s;
  }
  return y;
}

/// Convolution with a cell-varying input (K x cells).
inline Eigen::VectorXd convolve_tq(const Kernels& k, const Eigen::MatrixXd& u) {
  const Eigen::Index steps = u.rows();
  if (k.cells.rows() < steps || k.cells.cols() != u.cols()) {
    throw InputError("kernel and input dimensions disagree");
  }
  Eigen::VectorXd y = Eigen::VectorXd::Zero(steps);
  for (Eigen::Index i = 0; i < steps; ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) s += k.cells.row(i - j).dot(u.row(j));
    y(i) = s;
  }
  return y;
}

/// Derivative of Ahat = exp(A dt) in direction dA: the upper-right block of
/// exp([[A, dA], [0, A]] dt).
inline Eigen::MatrixXd expm_directional(const Eigen::MatrixXd& a, const Eigen::MatrixXd& da,
                                        double dt) {
  const Eigen::Index s = a.rows();
  Eigen::MatrixXd big = Eigen::MatrixXd::Zero(2 * s, 2 * s);
  big.topLeftCorner(s, s) = a;
  big.topRightCorner(s, s) = da;
  big.bottomRightCorner(s, s) = a;
  const Eigen::MatrixXd e = (big * dt).exp();
  return e.topRightCorner(s, s);
}

}  // namespace tacbrac
