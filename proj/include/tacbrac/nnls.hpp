#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tacbrac/error.hpp"

namespace tacbrac {

struct NnlsResult {
  Eigen::VectorXd x;
  double residual = 0.0;  ///< ||A x - b||
  int iterations = 0;
  bool converged = false;  ///< false when the iteration cap was reached
};

namespace detail {

/// Cholesky factor of the Gram matrix restricted to a growing/shrinking
/// passive set, updated in O(p^2) per change.
class PassiveCholesky {
 public:
  explicit PassiveCholesky(const Eigen::MatrixXd& gram)
      : gram_(gram), l_(Eigen::MatrixXd::Zero(gram.rows(), gram.rows())) {}

  int size() const { return static_cast<int>(set_.size()); }
  const std::vector<int>& set() const { return set_; }

  /// Appends column j; returns false when it is numerically dependent on the set.
  bool add(int j) {
    const int p = size();
    Eigen::VectorXd col(p);
    for (int i = 0; i < p; ++i) col(i) = gram_(set_[i], j);
    Eigen::VectorXd row = col;
    if (p > 0) l_.topLeftCorner(p, p).triangularView<Eigen::Lower>().solveInPlace(row);
    const double d2 = gram_(j, j) - row.squaredNorm();
    if (!(d2 > 1e-14 * gram_(j, j))) return false;
    l_.block(p, 0, 1, p) = row.transpose();
    l_(p, p) = std::sqrt(d2);
    set_.push_back(j);
    return true;
  }

  /// Removes the set member at position r.
  void remove(int r) {
    const int p = size();
    const int tail = p - r - 1;
    Eigen::VectorXd x = l_.block(r + 1, r, tail, 1);
    // Drop row and column r.
    for (int i = r; i + 1 < p; ++i) l_.row(i).head(p) = l_.row(i + 1).head(p);
    for (int j = r; j + 1 < p; ++j) l_.col(j).head(p - 1) = l_.col(j + 1).head(p - 1);
    l_.row(p - 1).setZero();
    l_.col(p - 1).setZero();
    // Rank-one update of the trailing block with the dropped column.
    for (int k = 0; k < tail; ++k) {
      const int kk = r + k;
      const double lkk = l_(kk, kk);
      const double rr = std::hypot(lkk, x(k));
      const double c = rr / lkk, s = x(k) / lkk;
      l_(kk, kk) = rr;
      const int rest = tail - k - 1;
      if (rest > 0) {
        auto lcol = l_.block(kk + 1, kk, rest, 1);
        lcol = (lcol + s * x.segment(k + 1, rest)) / c;
        x.segment(k + 1, rest) = c * x.segment(k + 1, rest) - s * lcol;
      }
    }
    set_.erase(set_.begin() + r);
  }

  /// Solves G_PP z = rhs_P.
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    const int p = size();
    Eigen::VectorXd z(p);
    for (int i = 0; i < p; ++i) z(i) = rhs(set_[i]);
    const auto l = l_.topLeftCorner(p, p);
    l.triangularView<Eigen::Lower>().solveInPlace(z);
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(z);
    return z;
  }

 private:
  const Eigen::MatrixXd& gram_;
  Eigen::MatrixXd l_;
  std::vector<int> set_;
};

}  // namespace detail

/// Lawson-Hanson active-set solution of min x'Gx - 2 x'c subject to x >= 0,
/// i.e. the normal-equation form with G = A'A and c = A'b. Passive-set
/// systems are solved through an incrementally updated Cholesky factor.
inline NnlsResult nnls_normal(const Eigen::MatrixXd& gram, const Eigen::VectorXd& atb,
                              int max_iter = 0) {
  const Eigen::Index n = gram.cols();
  if (n < 1) throw DomainError("nnls needs at least one column");
  if (gram.rows() != n || atb.size() != n) throw InputError("nnls: Gram matrix and A'b disagree");
  if (max_iter <= 0) max_iter = static_cast<int>(3 * n);
  const double tol = 1e-12 * atb.norm();

  NnlsResult out;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<char> passive(n, 0), blocked(n, 0);
  detail::PassiveCholesky chol(gram);
  Eigen::VectorXd w = atb;

  while (true) {
    int j = -1;
    double best = tol;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!passive[i] && !blocked[i] && w(i) > best) {
        best = w(i);
        j = static_cast<int>(i);
      }
    }
    if (j < 0) {
      out.converged = true;
      break;
    }
    if (out.iterations >= max_iter) break;
    ++out.iterations;
    if (!chol.add(j)) {
      blocked[j] = 1;
      continue;
    }
    passive[j] = 1;

    bool first = true;
    while (true) {
      const Eigen::VectorXd z = chol.solve(atb);
      const auto& set = chol.set();
      const int p = chol.size();
      if (first && z(p - 1) <= 0.0) {
        // Rounding prevents the entering variable from moving; freeze it.
        chol.remove(p - 1);
        passive[j] = 0;
        blocked[j] = 1;
        break;
      }
      if (first) std::fill(blocked.begin(), blocked.end(), 0);
      first = false;
      if ((z.array() > 0.0).all()) {
        for (int i = 0; i < p; ++i) x(set[i]) = z(i);
        break;
      }
      double alpha = 1.0;
      int hit = -1;
      for (int i = 0; i < p; ++i) {
        if (z(i) <= 0.0) {
          const double xi = x(set[i]);
          const double step = xi / (xi - z(i));
          if (step < alpha || hit < 0) {
            alpha = step;
            hit = i;
          }
        }
      }
      for (int i = 0; i < p; ++i) x(set[i]) += alpha * (z(i) - x(set[i]));
      x(set[hit]) = 0.0;
      for (int i = p - 1; i >= 0; --i) {
        const int idx = set[i];
        if (x(idx) <= 0.0) {
          x(idx) = 0.0;
          passive[idx] = 0;
          chol.remove(i);
        }
      }
      ++out.iterations;
      if (chol.size() == 0 || out.iterations >= max_iter) break;
    }
    w = atb;
    for (int idx : chol.set()) w -= x(idx) * gram.col(idx);
  }
  out.x = x;
  return out;
}

/// Lawson-Hanson solution of min ||A x - b|| subject to x >= 0. The final
/// passive set is re-solved by QR on A to remove normal-equation rounding.
inline NnlsResult nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, int max_iter = 0) {
  if (a.cols() < 1) throw DomainError("nnls needs at least one column");
  if (a.rows() != b.size()) throw InputError("nnls: A and b disagree in length");
  NnlsResult out = nnls_normal(a.transpose() * a, a.transpose() * b, max_iter);
  Eigen::VectorXd& x = out.x;
  std::vector<int> set;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x(i) > 0.0) set.push_back(static_cast<int>(i));
  }
  if (!set.empty()) {
    Eigen::MatrixXd ap(a.rows(), static_cast<Eigen::Index>(set.size()));
    for (std::size_t i = 0; i < set.size(); ++i) ap.col(i) = a.col(set[i]);
    const Eigen::VectorXd z = ap.colPivHouseholderQr().solve(b);
    if ((z.array() > 0.0).all() && (ap * z - b).norm() <= (a * x - b).norm()) {
      for (std::size_t i = 0; i < set.size(); ++i) x(set[i]) = z(i);
    }
  }
  out.residual = (a * x - b).norm();
  return out;
}

/// Largest KKT violation scaled by ||A'b||: |g_i| on the support and
/// max(0, -g_i) off it, with g = A'(A x - b).
inline double nnls_kkt_violation(const Eigen::MatrixXd& a, const Eigen::VectorXd& b,
                                 const Eigen::VectorXd& x) {
  const Eigen::VectorXd g = a.transpose() * (a * x - b);
  const double scale = std::max((a.transpose() * b).norm(), 1e-300);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (x(i) < 0.0) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, x(i) > 0.0 ? std::abs(g(i)) : std::max(0.0, -g(i)));
  }
  return worst / scale;
}

}  // namespace tacbrac
