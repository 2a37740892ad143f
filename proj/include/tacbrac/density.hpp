#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tacbrac/error.hpp"
#include "tacbrac/grid_basis.hpp"
#include "tacbrac/kv_config.hpp"
#include "tacbrac/quadrature.hpp"

namespace tacbrac {

/// Distribution parameters of the random rates q = (q1, q2): a bivariate
/// normal N(mu, sigma) truncated to the box [a1, b1] x [a2, b2].
struct PopulationParams {
  Eigen::Vector2d a = Eigen::Vector2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Ones();
  Eigen::Vector2d mu = Eigen::Vector2d::Constant(0.5);
  Eigen::Matrix2d sigma = Eigen::Matrix2d::Identity() * 0.01;

  /// Lower Cholesky factor of sigma; throws ParameterError unless SPD.
  Eigen::Matrix2d cholesky() const {
    if (!sigma.allFinite() || std::abs(sigma(0, 1) - sigma(1, 0)) >
                                  1e-12 * (std::abs(sigma(0, 1)) + 1e-300)) {
      throw ParameterError("covariance must be symmetric and finite");
    }
    const double l11sq = sigma(0, 0);
    if (!(l11sq > 0.0)) throw ParameterError("covariance is not positive definite");
    const double l11 = std::sqrt(l11sq);
    const double l21 = sigma(1, 0) / l11;
    const double l22sq = sigma(1, 1) - l21 * l21;
    if (!(l22sq > 0.0)) throw ParameterError("covariance is not positive definite");
    Eigen::Matrix2d l = Eigen::Matrix2d::Zero();
    l(0, 0) = l11;
    l(1, 0) = l21;
    l(1, 1) = std::sqrt(l22sq);
    return l;
  }

  void validate() const {
    for (int i = 0; i < 2; ++i) {
      if (!std::isfinite(a(i)) || !std::isfinite(b(i)) || !std::isfinite(mu(i))) {
        throw ParameterError("population parameters must be finite");
      }
      if (a(i) < 0.0) throw ParameterError("support lower bounds must be >= 0");
      if (!(a(i) < b(i))) throw ParameterError("support needs a_i < b_i");
    }
    (void)cholesky();
  }

  static PopulationParams from_cholesky(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                                        const Eigen::Vector2d& mu, const Eigen::Matrix2d& l) {
    PopulationParams p;
    p.a = a;
    p.b = b;
    p.mu = mu;
    Eigen::Matrix2d lower = l.triangularView<Eigen::Lower>();
    p.sigma = lower * lower.transpose();
    return p;
  }

  KeyValue to_kv() const {
    KeyValue kv;
    kv.set("a1", a(0));
    kv.set("a2", a(1));
    kv.set("b1", b(0));
    kv.set("b2", b(1));
    kv.set("mu1", mu(0));
    kv.set("mu2", mu(1));
    kv.set("s11", sigma(0, 0));
    kv.set("s12", sigma(0, 1));
    kv.set("s22", sigma(1, 1));
    return kv;
  }

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = {"a1", "a2", "b1",  "b2", "mu1",
                                               "mu2", "s11", "s12", "s22"};
    return k;
  }

  /// Reads the nine keys, optionally with a prefix (e.g. "rho_true.").
  static PopulationParams from_kv(const KeyValue& kv, const std::string& prefix = "") {
    PopulationParams p;
    p.a << kv.get_double(prefix + "a1"), kv.get_double(prefix + "a2");
    p.b << kv.get_double(prefix + "b1"), kv.get_double(prefix + "b2");
    p.mu << kv.get_double(prefix + "mu1"), kv.get_double(prefix + "mu2");
    const double s12 = kv.get_double(prefix + "s12");
    p.sigma << kv.get_double(prefix + "s11"), s12, s12, kv.get_double(prefix + "s22");
    return p;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    to_kv().write(out, keys());
  }

  static PopulationParams load(const std::string& path) { return from_kv(KeyValue::load(path)); }
};

/// Untruncated bivariate normal with cached Cholesky factor.
class BivariateNormal {
 public:
  /// Indices of the shape parameters used for analytic derivatives.
  enum Shape { kMu1 = 0, kMu2, kL11, kL21, kL22, kShapeCount };

  BivariateNormal(const Eigen::Vector2d& mu, const Eigen::Matrix2d& chol) : mu_(mu), l_(chol) {
    l_inv_ = l_.triangularView<Eigen::Lower>().solve(Eigen::Matrix2d::Identity());
    log_norm_ = -std::log(2.0 * std::numbers::pi) - std::log(l_(0, 0)) - std::log(l_(1, 1));
  }

  explicit BivariateNormal(const PopulationParams& p) : BivariateNormal(p.mu, p.cholesky()) {}

  const Eigen::Vector2d& mean() const { return mu_; }
  const Eigen::Matrix2d& chol() const { return l_; }

  double operator()(double x, double y) const { return at_offset(x - mu_(0), y - mu_(1)); }

  /// Density at mu + (d0, d1).
  double at_offset(double d0, double d1) const {
    const double w0 = l_inv_(0, 0) * d0;
    const double w1 = l_inv_(1, 0) * d0 + l_inv_(1, 1) * d1;
    return std::exp(log_norm_ - 0.5 * (w0 * w0 + w1 * w1));
  }

  /// d log(phi) / d(shape parameter) at (x, y).
  std::array<double, kShapeCount> score(double x, double y) const {
    const double d0 = x - mu_(0);
    const double d1 = y - mu_(1);
    const double w0 = l_inv_(0, 0) * d0;
    const double w1 = l_inv_(1, 0) * d0 + l_inv_(1, 1) * d1;
    // v = L^{-T} w = sigma^{-1} d
    const double v1 = l_inv_(1, 1) * w1;
    const double v0 = l_inv_(0, 0) * w0 + l_inv_(1, 0) * w1;
    std::array<double, kShapeCount> s{};
    s[kMu1] = v0;
    s[kMu2] = v1;
    s[kL11] = v0 * w0 - 1.0 / l_(0, 0);
    s[kL21] = v1 * w0;
    s[kL22] = v1 * w1 - 1.0 / l_(1, 1);
    return s;
  }

 private:
  Eigen::Vector2d mu_;
  Eigen::Matrix2d l_;
  Eigen::Matrix2d l_inv_;
  double log_norm_;
};

namespace detail {

// Cut points along one axis that keep each sub-interval a few standard
// deviations wide, so narrow densities are resolved by the adaptive rule.
inline std::vector<double> split_axis(double lo, double hi, double centre, double sd) {
  std::vector<double> cuts = {lo, hi};
  for (double k : {-12.0, -8.0, -5.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0}) {
    const double c = centre + k * sd;
    if (c > lo && c < hi) cuts.push_back(c);
  }
  std::sort(cuts.begin(), cuts.end());
  return cuts;
}

inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace detail

/// Integral of the untruncated normal density over the support box.
inline double box_probability(const BivariateNormal& phi, const quad::Box& box,
                              double tol = 1e-14) {
  const Eigen::Matrix2d& l = phi.chol();
  const double sd1 = l(0, 0);
  const double sd2 = std::sqrt(l(1, 0) * l(1, 0) + l(1, 1) * l(1, 1));
  // Integrated in offsets from the mean so narrow densities do not lose digits.
  const auto xs = detail::split_axis(box.x0 - phi.mean()(0), box.x1 - phi.mean()(0), 0.0, sd1);
  const auto ys = detail::split_axis(box.y0 - phi.mean()(1), box.y1 - phi.mean()(1), 0.0, sd2);
  const auto f = [&phi](double d0, double d1) { return phi.at_offset(d0, d1); };
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
      total += quad::adaptive_2d(f, quad::Box{xs[i], xs[i + 1], ys[j], ys[j + 1]}, tol);
    }
  }
  return total;
}

/// Truncated bivariate normal with its normalising constant precomputed.
class TruncatedNormal2d {
 public:
  explicit TruncatedNormal2d(const PopulationParams& p) : params_(p), phi_(p) {
    p.validate();
    z_ = box_probability(phi_, support());
    if (!(z_ > 0.0)) {
      throw ParameterError("support box carries no probability mass under N(mu, sigma)");
    }
  }

  const PopulationParams& params() const { return params_; }
  const BivariateNormal& normal() const { return phi_; }
  quad::Box support() const { return {params_.a(0), params_.b(0), params_.a(1), params_.b(1)}; }

  /// Untruncated mass of the support box (the normalising constant).
  double normalization() const { return z_; }

  bool inside(double x, double y) const {
    return x >= params_.a(0) && x <= params_.b(0) && y >= params_.a(1) && y <= params_.b(1);
  }

  double pdf(double x, double y) const { return inside(x, y) ? phi_(x, y) / z_ : 0.0; }
  double pdf(const Eigen::Vector2d& q) const { return pdf(q(0), q(1)); }

 private:
  PopulationParams params_;
  BivariateNormal phi_;
  double z_;
};

inline double pdf(const PopulationParams& rho, const Eigen::Vector2d& q) {
  return TruncatedNormal2d(rho).pdf(q);
}

/// Per-cell mass and conditional means of the truncated density on a
/// piecewise-constant parameter grid. Matrices are m1 x m2.
struct CellMoments {
  int order = 5;
  double total = 0.0;       ///< sum of raw cell integrals (normalising constant)
  Eigen::MatrixXd mass;     ///< probability of each cell
  Eigen::MatrixXd mean_q1;  ///< E[q1 | cell]
  Eigen::MatrixXd mean_q2;  ///< E[q2 | cell]

  /// Derivatives with respect to the shape parameters (mu1, mu2, L11, L21,
  /// L22); empty unless requested.
  std::array<Eigen::MatrixXd, BivariateNormal::kShapeCount> d_mass;
  std::array<Eigen::MatrixXd, BivariateNormal::kShapeCount> d_mean_q1;
  std::array<Eigen::MatrixXd, BivariateNormal::kShapeCount> d_mean_q2;
};

inline void check_mesh_matches(const PopulationParams& rho, const ParamMesh& pm1,
                               const ParamMesh& pm2) {
  auto close = [](double x, double y) {
    return std::abs(x - y) <= 1e-12 * std::max({1.0, std::abs(x), std::abs(y)});
  };
  if (!close(pm1.lo(), rho.a(0)) || !close(pm1.hi(), rho.b(0)) || !close(pm2.lo(), rho.a(1)) ||
      !close(pm2.hi(), rho.b(1))) {
    throw ConfigError("parameter meshes do not cover the support [a1,b1]x[a2,b2]");
  }
}

namespace detail {

struct RawCells {
  Eigen::MatrixXd p, w1, w2;
  std::array<Eigen::MatrixXd, BivariateNormal::kShapeCount> dp, dw1, dw2;
};

inline RawCells raw_cell_integrals(const BivariateNormal& phi, const ParamMesh& pm1,
                                   const ParamMesh& pm2, int order, bool derivs) {
  const quad::GaussRule& rule = quad::gauss_legendre(order);
  const int m1 = pm1.cells();
  const int m2 = pm2.cells();
  RawCells r;
  r.p = Eigen::MatrixXd::Zero(m1, m2);
  r.w1 = Eigen::MatrixXd::Zero(m1, m2);
  r.w2 = Eigen::MatrixXd::Zero(m1, m2);
  if (derivs) {
    for (int s = 0; s < BivariateNormal::kShapeCount; ++s) {
      r.dp[s] = Eigen::MatrixXd::Zero(m1, m2);
      r.dw1[s] = Eigen::MatrixXd::Zero(m1, m2);
      r.dw2[s] = Eigen::MatrixXd::Zero(m1, m2);
    }
  }
  for (int j2 = 0; j2 < m2; ++j2) {
    const double y0 = pm2.edge(j2), y1 = pm2.edge(j2 + 1);
    const double hy = 0.5 * (y1 - y0), cy = 0.5 * (y1 + y0);
    for (int j1 = 0; j1 < m1; ++j1) {
      const double x0 = pm1.edge(j1), x1 = pm1.edge(j1 + 1);
      const double hx = 0.5 * (x1 - x0), cx = 0.5 * (x1 + x0);
      const double area = hx * hy;
      double p = 0.0, w1 = 0.0, w2 = 0.0;
      std::array<double, BivariateNormal::kShapeCount> dp{}, dw1{}, dw2{};
      for (int i = 0; i < order; ++i) {
        const double x = cx + hx * rule.nodes[i];
        for (int j = 0; j < order; ++j) {
          const double y = cy + hy * rule.nodes[j];
          const double w = rule.weights[i] * rule.weights[j] * area * phi(x, y);
          p += w;
          w1 += w * x;
          w2 += w * y;
          if (derivs) {
            const auto sc = phi.score(x, y);
            for (int s = 0; s < BivariateNormal::kShapeCount; ++s) {
              dp[s] += w * sc[s];
              dw1[s] += w * sc[s] * x;
              dw2[s] += w * sc[s] * y;
            }
          }
        }
      }
      r.p(j1, j2) = p;
      r.w1(j1, j2) = w1;
      r.w2(j1, j2) = w2;
      if (derivs) {
        for (int s = 0; s < BivariateNormal::kShapeCount; ++s) {
          r.dp[s](j1, j2) = dp[s];
          r.dw1[s](j1, j2) = dw1[s];
          r.dw2[s](j1, j2) = dw2[s];
        }
      }
    }
  }
  return r;
}

}  // namespace detail

/// Quadrature order for the cell integrals: starts at 5 and doubles while
/// two successive orders disagree by more than 1e-8 in the normalising sum.
inline int select_cell_order(const BivariateNormal& phi, const ParamMesh& pm1,
                             const ParamMesh& pm2, int start = 5) {
  int order = start;
  double prev = detail::raw_cell_integrals(phi, pm1, pm2, order, false).p.sum();
  while (order < 320) {
    const double next = detail::raw_cell_integrals(phi, pm1, pm2, 2 * order, false).p.sum();
    if (std::abs(next - prev) <= 1e-8 * std::abs(next)) return order;
    order *= 2;
    prev = next;
  }
  return order;
}

/// Cell masses and conditional means. `order` <= 0 selects it automatically.
inline CellMoments cell_moments(const PopulationParams& rho, const ParamMesh& pm1,
                                const ParamMesh& pm2, int order = 0, bool derivs = false) {
  rho.validate();
  check_mesh_matches(rho, pm1, pm2);
  const BivariateNormal phi(rho);
  if (order <= 0) order = select_cell_order(phi, pm1, pm2);
  const detail::RawCells raw = detail::raw_cell_integrals(phi, pm1, pm2, order, derivs);

  const int m1 = pm1.cells(), m2 = pm2.cells();
  CellMoments out;
  out.order = order;
  out.total = raw.p.sum();
  if (!(out.total > 0.0)) {
    throw ParameterError("support box carries no probability mass under N(mu, sigma)");
  }
  out.mass = raw.p / out.total;
  out.mean_q1.resize(m1, m2);
  out.mean_q2.resize(m1, m2);
  for (int j2 = 0; j2 < m2; ++j2) {
    for (int j1 = 0; j1 < m1; ++j1) {
      const double p = raw.p(j1, j2);
      if (p > 0.0) {
        out.mean_q1(j1, j2) = raw.w1(j1, j2) / p;
        out.mean_q2(j1, j2) = raw.w2(j1, j2) / p;
      } else {
        out.mean_q1(j1, j2) = 0.5 * (pm1.edge(j1) + pm1.edge(j1 + 1));
        out.mean_q2(j1, j2) = 0.5 * (pm2.edge(j2) + pm2.edge(j2 + 1));
      }
    }
  }
  if (derivs) {
    for (int s = 0; s < BivariateNormal::kShapeCount; ++s) {
      const double dtotal = raw.dp[s].sum();
      out.d_mass[s] = (raw.dp[s] - out.mass * dtotal) / out.total;
      out.d_mean_q1[s] = Eigen::MatrixXd::Zero(m1, m2);
      out.d_mean_q2[s] = Eigen::MatrixXd::Zero(m1, m2);
      for (int j2 = 0; j2 < m2; ++j2) {
        for (int j1 = 0; j1 < m1; ++j1) {
          const double p = raw.p(j1, j2);
          if (p > 0.0) {
            out.d_mean_q1[s](j1, j2) =
                (raw.dw1[s](j1, j2) - out.mean_q1(j1, j2) * raw.dp[s](j1, j2)) / p;
            out.d_mean_q2[s](j1, j2) =
                (raw.dw2[s](j1, j2) - out.mean_q2(j1, j2) * raw.dp[s](j1, j2)) / p;
          }
        }
      }
    }
  }
  return out;
}

/// Probability of each parameter cell (m1 x m2, sums to one).
inline Eigen::MatrixXd cell_masses(const PopulationParams& rho, const ParamMesh& pm1,
                                   const ParamMesh& pm2) {
  return cell_moments(rho, pm1, pm2).mass;
}

/// Rejection sampling of the truncated density. Deterministic for a seed.
inline std::vector<Eigen::Vector2d> sample(const PopulationParams& rho, std::size_t count,
                                           std::uint64_t seed) {
  if (count < 1) throw DomainError("sample count must be >= 1");
  rho.validate();
  const BivariateNormal phi(rho);
  const quad::Box box{rho.a(0), rho.b(0), rho.a(1), rho.b(1)};
  const double acceptance = box_probability(phi, box, 1e-12);
  if (!(acceptance >= 1e-6)) {
    std::ostringstream msg;
    msg << "rejection sampling acceptance rate " << acceptance
        << " is below 1e-6: the support box is nearly disjoint from N(mu, sigma)";
    throw SamplingError(msg.str());
  }
  const Eigen::Matrix2d l = rho.cholesky();
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Eigen::Vector2d> out;
  out.reserve(count);
  while (out.size() < count) {
    const double z0 = normal(gen);
    const double z1 = normal(gen);
    const double x = rho.mu(0) + l(0, 0) * z0;
    const double y = rho.mu(1) + l(1, 0) * z0 + l(1, 1) * z1;
    if (x >= rho.a(0) && x <= rho.b(0) && y >= rho.a(1) && y <= rho.b(1)) {
      out.emplace_back(x, y);
    }
  }
  return out;
}

/// Untruncated normal mass of (disk of radius r around mu) intersected with the
/// support box. Integrates the conditional normal of q2 in closed form and the
/// q1 direction by Gauss-Legendre after the substitution q1 = mu1 + r sin(t).
inline double disk_box_probability(const PopulationParams& rho, double r) {
  if (r <= 0.0) return 0.0;
  const double m1 = rho.mu(0), m2 = rho.mu(1);
  const double s11 = rho.sigma(0, 0), s12 = rho.sigma(0, 1), s22 = rho.sigma(1, 1);
  const double cond_sd = std::sqrt(s22 - s12 * s12 / s11);
  const double beta = s12 / s11;
  const double sd1 = std::sqrt(s11);

  const double xlo = std::max(rho.a(0), m1 - r);
  const double xhi = std::min(rho.b(0), m1 + r);
  if (!(xhi > xlo)) return 0.0;
  const double tlo = std::asin(std::clamp((xlo - m1) / r, -1.0, 1.0));
  const double thi = std::asin(std::clamp((xhi - m1) / r, -1.0, 1.0));

  std::vector<double> cuts = {tlo, thi};
  for (double edge : {rho.a(1), rho.b(1)}) {
    const double c = std::abs(edge - m2) / r;
    if (c < 1.0) {
      const double t = std::acos(c);
      for (double cand : {t, -t}) {
        if (cand > tlo && cand < thi) cuts.push_back(cand);
      }
    }
  }
  // Breakpoints a few q1 standard deviations apart around mu1.
  for (double k : detail::split_axis(-r, r, 0.0, sd1)) {
    const double t = std::asin(std::clamp(k / r, -1.0, 1.0));
    if (t > tlo && t < thi) cuts.push_back(t);
  }
  std::sort(cuts.begin(), cuts.end());

  auto integrand = [&](double t) {
    const double x = m1 + r * std::sin(t);
    const double half = r * std::cos(t);
    const double ylo = std::max(rho.a(1), m2 - half);
    const double yhi = std::min(rho.b(1), m2 + half);
    if (!(yhi > ylo)) return 0.0;
    const double dx = (x - m1) / sd1;
    const double marginal = std::exp(-0.5 * dx * dx) / (sd1 * std::sqrt(2.0 * std::numbers::pi));
    const double cm = m2 + beta * (x - m1);
    const double inner = detail::std_normal_cdf((yhi - cm) / cond_sd) -
                         detail::std_normal_cdf((ylo - cm) / cond_sd);
    return marginal * inner * r * std::cos(t);
  };

  double total = 0.0;
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const double lo = cuts[k], hi = cuts[k + 1];
    if (hi - lo < 1e-15) continue;
    // Split each piece further so the Gaussian factor is well resolved.
    const int pieces = 8;
    for (int p = 0; p < pieces; ++p) {
      const double a = lo + (hi - lo) * p / pieces;
      const double b = lo + (hi - lo) * (p + 1) / pieces;
      total += quad::gauss_1d(integrand, a, b, 24);
    }
  }
  return total;
}

/// Probability under the truncated density of the disk of radius r around mu.
inline double disk_probability(const TruncatedNormal2d& dist, double r) {
  return std::min(1.0, disk_box_probability(dist.params(), r) / dist.normalization());
}

struct CredibleRadius {
  double radius = 0.0;
  bool covers_support = false;  ///< alpha could not be reached inside the support
};

/// Radius of the disk centred at mu holding probability alpha, by bisection.
inline CredibleRadius credible_region_radius(const PopulationParams& rho, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
  const TruncatedNormal2d dist(rho);
  double far = 0.0;
  for (double x : {rho.a(0), rho.b(0)}) {
    for (double y : {rho.a(1), rho.b(1)}) {
      far = std::max(far, std::hypot(x - rho.mu(0), y - rho.mu(1)));
    }
  }
  CredibleRadius out;
  if (disk_probability(dist, far) < alpha) {
    out.radius = far;
    out.covers_support = true;
    return out;
  }
  double lo = 0.0, hi = far;
  for (int it = 0; it < 200 && hi - lo > 1e-13 * far; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (disk_probability(dist, mid) < alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  out.radius = 0.5 * (lo + hi);
  return out;
}

}  // namespace tacbrac
