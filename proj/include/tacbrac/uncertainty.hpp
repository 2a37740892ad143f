#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "tacbrac/deconvolution.hpp"
#include "tacbrac/density.hpp"
#include "tacbrac/error.hpp"
#include "tacbrac/forward_model.hpp"
#include "tacbrac/grid_basis.hpp"
#include "tacbrac/parallel.hpp"

namespace tacbrac {

/// Pointwise min/max envelope of the BrAC curves of the parameter samples in
/// the credible disk.
struct CredibleBand {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  double alpha = 0.75;
  int n_samples = 0;
  int kept = 0;  ///< drawn samples inside the disk (the mean is added on top)
  std::uint64_t seed = 0;
  double radius = 0.0;
};

namespace detail {

struct CredibleDraw {
  std::vector<Eigen::Vector2d> kept;  ///< mu first, then the drawn samples inside the disk
  int drawn_inside = 0;
  double radius = 0.0;
};

inline CredibleDraw credible_draw(const PopulationParams& rho, double alpha, int n_samples,
                                  std::uint64_t seed) {
  if (n_samples < 1) throw DomainError("n_samples must be >= 1");
  const double radius = credible_region_radius(rho, alpha).radius;
  CredibleDraw d;
  d.radius = radius;
  d.kept.push_back(rho.mu);
  for (const auto& q : sample(rho, static_cast<std::size_t>(n_samples), seed)) {
    if ((q - rho.mu).norm() <= radius) d.kept.push_back(q);
  }
  d.drawn_inside = static_cast<int>(d.kept.size()) - 1;
  if (d.drawn_inside == 0) {
    throw SamplingError("no sample fell inside the credible disk; increase n_samples (currently " +
                        std::to_string(n_samples) + ")");
  }
  return d;
}

inline void require_tq(const DeconvolutionResult& r, const DiscretizationGrid& grid) {
  if (r.variant != Variant::tq) throw InputError("this operation needs a tq-variant result");
  if (r.coeffs.cols() != grid.cells()) {
    throw InputError("result has " + std::to_string(r.coeffs.cols()) + " cells but the grid has " +
                     std::to_string(grid.cells()));
  }
}

inline CredibleBand envelope(const std::vector<Eigen::VectorXd>& curves) {
  CredibleBand b;
  b.lower = curves.front();
  b.upper = curves.front();
  for (const auto& c : curves) {
    b.lower = b.lower.cwiseMin(c);
    b.upper = b.upper.cwiseMax(c);
  }
  return b;
}

}  // namespace detail

/// Index of the parameter cell holding q, or -1 outside the support.
inline int cell_of(const PopulationParams& rho, const DiscretizationGrid& grid,
                   const Eigen::Vector2d& q) {
  const int j1 = ParamMesh(grid.m1, rho.a(0), rho.b(0)).locate(q(0));
  const int j2 = ParamMesh(grid.m2, rho.a(1), rho.b(1)).locate(q(1));
  if (j1 < 0 || j2 < 0) return -1;
  return j1 + grid.m1 * j2;
}

/// BrAC curve of a tq result at parameter value q (piecewise constant in q).
inline Eigen::VectorXd curve_at(const DeconvolutionResult& r, const PopulationParams& rho,
                                const DiscretizationGrid& grid, const Eigen::Vector2d& q) {
  const int c = cell_of(rho, grid, q);
  if (c < 0) throw DomainError("parameter value lies outside the support");
  return r.curve(c);
}

/// Band for a tq-variant result. The curve at mu is always part of the envelope.
inline CredibleBand credible_band(const DeconvolutionResult& result, const PopulationParams& rho,
                                  const DiscretizationGrid& grid, double alpha = 0.75,
                                  int n_samples = 1000, std::uint64_t seed = 1) {
  detail::require_tq(result, grid);
  const detail::CredibleDraw d = detail::credible_draw(rho, alpha, n_samples, seed);
  std::vector<Eigen::VectorXd> curves;
  curves.reserve(d.kept.size());
  for (const auto& q : d.kept) curves.push_back(curve_at(result, rho, grid, q));
  CredibleBand b = detail::envelope(curves);
  b.alpha = alpha;
  b.n_samples = n_samples;
  b.kept = d.drawn_inside;
  b.seed = seed;
  b.radius = d.radius;
  return b;
}

/// Statistics I-V of a BrAC curve sampled every tau minutes from t = 0.
struct EpisodeStats {
  double peak = 0.0;              ///< I, percent alcohol
  double peak_time = 0.0;         ///< II, hours
  double auc = 0.0;               ///< III, percent alcohol x hours
  double elimination_rate = std::numeric_limits<double>::quiet_NaN();  ///< IV, percent per hour
  double absorption_rate = std::numeric_limits<double>::quiet_NaN();   ///< V, percent per hour
  bool elimination_defined = false;
  bool absorption_defined = false;
  double threshold = 0.001;

  static constexpr int kCount = 5;

  /// Statistic I..V by index 0..4; undefined rates are NaN.
  double value(int i) const {
    switch (i) {
      case 0: return peak;
      case 1: return peak_time;
      case 2: return auc;
      case 3: return elimination_rate;
      case 4: return absorption_rate;
      default: throw DomainError("statistic index must be 0..4");
    }
  }
};

inline EpisodeStats episode_stats(const Eigen::VectorXd& curve, double tau = 1.0,
                                  double threshold = 0.001) {
  if (curve.size() == 0) throw InputError("statistics need a non-empty curve");
  if (!(tau > 0.0)) throw DomainError("tau must be positive");
  if (curve.minCoeff() < 0.0) throw InputError("BrAC curve must be nonnegative");
  EpisodeStats s;
  s.threshold = threshold;
  const double step_h = tau / 60.0;
  Eigen::Index ipk = 0;
  s.peak = curve.maxCoeff(&ipk);
  for (Eigen::Index j = 0; j < curve.size(); ++j) {
    if (curve(j) == s.peak) {
      ipk = j;
      break;
    }
  }
  s.peak_time = static_cast<double>(ipk) * step_h;
  for (Eigen::Index j = 0; j + 1 < curve.size(); ++j) s.auc += 0.5 * (curve(j) + curve(j + 1)) * step_h;
  if (!(s.peak > 0.0)) return s;
  for (Eigen::Index j = ipk + 1; j < curve.size(); ++j) {
    if (curve(j) < threshold) {
      s.elimination_rate = s.peak / (static_cast<double>(j - ipk) * step_h);
      s.elimination_defined = true;
      break;
    }
  }
  for (Eigen::Index j = ipk - 1; j >= 0; --j) {
    if (curve(j) < threshold) {
      s.absorption_rate = s.peak / (static_cast<double>(ipk - j) * step_h);
      s.absorption_defined = true;
      break;
    }
  }
  return s;
}

/// Per-statistic (min, max) over the curves of the kept parameter samples.
struct StatsIntervals {
  std::array<double, EpisodeStats::kCount> lo{};
  std::array<double, EpisodeStats::kCount> hi{};
  std::array<int, EpisodeStats::kCount> undefined{};  ///< samples excluded per statistic
  int samples = 0;
  double alpha = 0.75;
};

namespace detail {

inline StatsIntervals intervals_from_curves(const std::vector<Eigen::VectorXd>& curves, double tau,
                                            double threshold, double alpha) {
  StatsIntervals out;
  out.alpha = alpha;
  out.samples = static_cast<int>(curves.size());
  out.lo.fill(std::numeric_limits<double>::quiet_NaN());
  out.hi.fill(std::numeric_limits<double>::quiet_NaN());
  for (const auto& c : curves) {
    const EpisodeStats s = episode_stats(c, tau, threshold);
    for (int i = 0; i < EpisodeStats::kCount; ++i) {
      const double v = s.value(i);
      if (std::isnan(v)) {
        ++out.undefined[i];
        continue;
      }
      out.lo[i] = std::isnan(out.lo[i]) ? v : std::min(out.lo[i], v);
      out.hi[i] = std::isnan(out.hi[i]) ? v : std::max(out.hi[i], v);
    }
  }
  return out;
}

}  // namespace detail

inline StatsIntervals stats_credible_intervals(const DeconvolutionResult& result,
                                               const PopulationParams& rho,
                                               const DiscretizationGrid& grid, double alpha = 0.75,
                                               int n_samples = 1000, std::uint64_t seed = 1,
                                               double threshold = 0.001) {
  detail::require_tq(result, grid);
  const detail::CredibleDraw d = detail::credible_draw(rho, alpha, n_samples, seed);
  std::vector<Eigen::VectorXd> curves;
  curves.reserve(d.kept.size());
  for (const auto& q : d.kept) curves.push_back(curve_at(result, rho, grid, q));
  return detail::intervals_from_curves(curves, result.tau, threshold, alpha);
}

/// Band and statistic intervals of the scalar variant from one set of
/// per-sample deconvolutions.
struct ScalarUncertainty {
  CredibleBand band;
  StatsIntervals intervals;
};

/// One deterministic scalar deconvolution per kept parameter sample.
inline ScalarUncertainty scalar_uncertainty(const Eigen::VectorXd& tac, const PopulationParams& rho,
                                            const DiscretizationGrid& grid, double alpha,
                                            int n_samples, std::uint64_t seed, double r1, double r2,
                                            double threshold = 0.001, unsigned threads = 0) {
  const detail::CredibleDraw d = detail::credible_draw(rho, alpha, n_samples, seed);
  const std::size_t count = d.kept.size();
  std::vector<Eigen::VectorXd> curves(count);
  std::vector<char> ok(count, 0);
  parallel_for(
      count,
      [&](std::size_t i) {
        try {
          const DiscreteTimeOps ops(
              deterministic_system(d.kept[i](0), d.kept[i](1), grid.n, grid.model_step()));
          const DeconvolutionResult r =
              deconvolve(build_problem(ops, grid, tac, r1, r2, Variant::scalar));
          if (r.converged) {
            curves[i] = r.mean_curve;
            ok[i] = 1;
          }
        } catch (const Error&) {
        }
      },
      threads);
  std::vector<Eigen::VectorXd> good;
  for (std::size_t i = 0; i < count; ++i) {
    if (ok[i]) good.push_back(curves[i]);
  }
  const std::size_t failed = count - good.size();
  if (good.empty() || failed * 10 > count) {
    throw NumericalError(std::to_string(failed) + " of " + std::to_string(count) +
                         " per-sample deconvolutions failed");
  }
  ScalarUncertainty out;
  out.band = detail::envelope(good);
  out.band.alpha = alpha;
  out.band.n_samples = n_samples;
  out.band.kept = d.drawn_inside;
  out.band.seed = seed;
  out.band.radius = d.radius;
  out.intervals = detail::intervals_from_curves(good, grid.tau, threshold, alpha);
  return out;
}

inline CredibleBand credible_band_scalar(const Eigen::VectorXd& tac, const PopulationParams& rho,
                                         const DiscretizationGrid& grid, double alpha,
                                         int n_samples, std::uint64_t seed, double r1, double r2,
                                         unsigned threads = 0) {
  return scalar_uncertainty(tac, rho, grid, alpha, n_samples, seed, r1, r2, 0.001, threads).band;
}

/// Four-decimal rendering used by the statistics reports; "n/a" for undefined.
inline std::string format_stat(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// "I, II, III, IV, V" row.
inline std::string render_stats_row(const EpisodeStats& s) {
  std::string out;
  for (int i = 0; i < EpisodeStats::kCount; ++i) {
    if (i) out += ", ";
    out += format_stat(s.value(i));
  }
  return out;
}

/// "[lo,hi], ..." row.
inline std::string render_interval_row(const StatsIntervals& iv) {
  std::string out;
  for (int i = 0; i < EpisodeStats::kCount; ++i) {
    if (i) out += ", ";
    out += "[" + format_stat(iv.lo[i]) + "," + format_stat(iv.hi[i]) + "]";
  }
  return out;
}

/// Stats report: one row per episode with measured, estimated and interval columns.
struct StatsReportRow {
  std::string episode;
  EpisodeStats measured;
  EpisodeStats estimated;
  StatsIntervals intervals;
  bool has_measured = false;
  bool has_intervals = false;
};

inline void write_stats_report(std::ostream& out, const std::vector<StatsReportRow>& rows) {
  static const char* names[] = {"I", "II", "III", "IV", "V"};
  out << "episode";
  for (const char* n : names) out << ',' << n << "_measured";
  for (const char* n : names) out << ',' << n << "_estimated";
  for (const char* n : names) out << ',' << n << "_lo," << n << "_hi";
  out << '\n';
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : rows) {
    out << r.episode;
    for (int i = 0; i < EpisodeStats::kCount; ++i) {
      out << ',' << format_stat(r.has_measured ? r.measured.value(i) : nan);
    }
    for (int i = 0; i < EpisodeStats::kCount; ++i) out << ',' << format_stat(r.estimated.value(i));
    for (int i = 0; i < EpisodeStats::kCount; ++i) {
      out << ',' << format_stat(r.has_intervals ? r.intervals.lo[i] : nan) << ','
          << format_stat(r.has_intervals ? r.intervals.hi[i] : nan);
    }
    out << '\n';
  }
}

}  // namespace tacbrac
