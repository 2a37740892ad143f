#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tacbrac/error.hpp"

namespace tacbrac {

struct Sample {
  double t;      ///< minutes
  double value;  ///< percent alcohol (BrAC) or TAC units
};

using Series = std::vector<Sample>;

/// One drinking episode as recorded: BrAC and TAC series on their own clocks.
struct Episode {
  std::string id;
  Series brac;
  Series tac;

  bool has_brac() const { return !brac.empty(); }
  bool has_tac() const { return !tac.empty(); }

  /// Earliest timestamp over both channels; the resampling grid starts here.
  double origin() const {
    double t = std::numeric_limits<double>::infinity();
    if (has_brac()) t = std::min(t, brac.front().t);
    if (has_tac()) t = std::min(t, tac.front().t);
    return t;
  }
};

namespace detail {

inline std::string trim_ws(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim_ws(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, std::size_t line, const char* what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ParseError(std::string("invalid ") + what + " '" + s + "'", line);
  }
  if (pos != s.size() || !std::isfinite(v)) {
    throw ParseError(std::string("invalid ") + what + " '" + s + "'", line);
  }
  return v;
}

inline std::string format_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Parses the `t_minutes,channel,value` episode format.
inline Episode parse_episode(std::istream& in, const std::string& id = "") {
  Episode ep;
  ep.id = id;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::set<std::pair<std::string, double>> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string trimmed = detail::trim_ws(line);
    if (trimmed.empty()) continue;
    const auto fields = detail::split_csv(trimmed);
    if (!header) {
      if (fields.size() != 3 || fields[0] != "t_minutes" || fields[1] != "channel" ||
          fields[2] != "value") {
        throw ParseError("expected header 't_minutes,channel,value'", lineno);
      }
      header = true;
      continue;
    }
    if (fields.size() != 3) throw ParseError("expected 3 fields", lineno);
    const double t = detail::parse_number(fields[0], lineno, "time");
    const std::string& channel = fields[1];
    const double v = detail::parse_number(fields[2], lineno, "value");
    if (channel != "brac" && channel != "tac") {
      throw ParseError("unknown channel '" + channel + "'", lineno);
    }
    if (v < 0.0) throw ParseError("negative value", lineno);
    if (!seen.insert({channel, t}).second) {
      throw ParseError("duplicate " + channel + " sample at t=" + fields[0], lineno);
    }
    Series& s = channel == "brac" ? ep.brac : ep.tac;
    if (!s.empty() && t < s.back().t) {
      throw ParseError(channel + " timestamps are not increasing", lineno);
    }
    s.push_back({t, v});
  }
  if (!header) throw ParseError("empty file: missing header");
  return ep;
}

inline std::string stem_of(const std::string& path) {
  const auto slash = path.find_last_of("/\\");
  std::string name = slash == std::string::npos ? path : path.substr(slash + 1);
  const auto dot = name.find_last_of('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

inline Episode parse_episode(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return parse_episode(in, stem_of(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.line());
  }
}

inline void write_episode(std::ostream& out, const Episode& ep) {
  out << "t_minutes,channel,value\n";
  for (const auto& s : ep.brac) {
    out << detail::format_full(s.t) << ",brac," << detail::format_full(s.value) << '\n';
  }
  for (const auto& s : ep.tac) {
    out << detail::format_full(s.t) << ",tac," << detail::format_full(s.value) << '\n';
  }
}

inline void write_episode(const std::string& path, const Episode& ep) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  write_episode(out, ep);
}

/// Natural cubic spline through (t_i, v_i). Outside the data range the
/// end values are held constant.
class NaturalCubicSpline {
 public:
  explicit NaturalCubicSpline(const Series& s) {
    if (s.size() < 2) throw ValidationError("resampling needs at least two samples");
    const std::size_t n = s.size();
    t_.resize(n);
    v_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      t_[i] = s[i].t;
      v_[i] = s[i].value;
      if (i > 0 && !(t_[i] > t_[i - 1])) {
        throw ValidationError("spline knots must be strictly increasing");
      }
    }
    // Second derivatives from the tridiagonal system, natural end conditions.
    m_.assign(n, 0.0);
    if (n > 2) {
      const std::size_t k = n - 2;
      std::vector<double> diag(k), upper(k), rhs(k);
      for (std::size_t i = 1; i + 1 < n; ++i) {
        const double h0 = t_[i] - t_[i - 1];
        const double h1 = t_[i + 1] - t_[i];
        diag[i - 1] = 2.0 * (h0 + h1);
        upper[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((v_[i + 1] - v_[i]) / h1 - (v_[i] - v_[i - 1]) / h0);
      }
      for (std::size_t i = 1; i < k; ++i) {
        const double w = upper[i - 1] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
      }
      m_[k] = rhs[k - 1] / diag[k - 1];
      for (std::size_t i = k - 1; i >= 1; --i) {
        m_[i] = (rhs[i - 1] - upper[i - 1] * m_[i + 1]) / diag[i - 1];
      }
    }
  }

  double operator()(double t) const {
    if (t <= t_.front()) return v_.front();
    if (t >= t_.back()) return v_.back();
    const auto it = std::upper_bound(t_.begin(), t_.end(), t);
    const std::size_t i = static_cast<std::size_t>(it - t_.begin()) - 1;
    const double h = t_[i + 1] - t_[i];
    const double a = (t_[i + 1] - t) / h;
    const double b = (t - t_[i]) / h;
    return a * v_[i] + b * v_[i + 1] +
           ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
  }

 private:
  std::vector<double> t_, v_, m_;
};

/// Spline values at origin + k tau, k = 0..count-1, clamped at zero.
inline Eigen::VectorXd resample(const Series& s, double tau, double origin, int count) {
  if (!(tau > 0.0)) throw DomainError("resampling step must be positive");
  const NaturalCubicSpline spline(s);
  Eigen::VectorXd out(count);
  for (int k = 0; k < count; ++k) out(k) = std::max(0.0, spline(origin + k * tau));
  return out;
}

/// Spline values on 0, tau, 2 tau, ..., up to the last sample time.
inline Eigen::VectorXd resample(const Series& s, double tau = 1.0) {
  if (s.size() < 2) throw ValidationError("resampling needs at least two samples");
  const int count = static_cast<int>(std::floor(s.back().t / tau + 1e-9)) + 1;
  return resample(s, tau, 0.0, count);
}

/// An episode on the uniform model grid. Inputs u_0..u_{K-1} are the
/// zero-order-hold BrAC values at origin + j tau; outputs y_1..y_K are TAC at
/// origin + k tau (stored with index k-1). `observed` lists the output indices
/// (0-based, i.e. k-1) nearest the original TAC instants, k >= 1.
struct GridEpisode {
  std::string id;
  double origin = 0.0;
  double tau = 1.0;
  Eigen::VectorXd u;
  Eigen::VectorXd y;
  std::vector<int> observed;

  int steps() const { return static_cast<int>(y.size() > 0 ? y.size() : u.size()); }
};

/// Resamples an episode onto the tau grid starting at its earliest timestamp.
/// Channels absent from the file are left empty.
inline GridEpisode to_grid(const Episode& ep, double tau = 1.0) {
  if (!ep.has_brac() && !ep.has_tac()) throw ValidationError("episode '" + ep.id + "' is empty");
  GridEpisode g;
  g.id = ep.id;
  g.tau = tau;
  g.origin = ep.origin();
  const Series& span = ep.has_tac() ? ep.tac : ep.brac;
  const int steps = static_cast<int>(std::floor((span.back().t - g.origin) / tau + 1e-9));
  if (steps < 1) throw ValidationError("episode '" + ep.id + "' is shorter than one step");
  if (ep.has_brac()) g.u = resample(ep.brac, tau, g.origin, steps);
  if (ep.has_tac()) {
    g.y = resample(ep.tac, tau, g.origin + tau, steps);
    std::set<int> idx;
    for (const auto& s : ep.tac) {
      const int k = static_cast<int>(std::lround((s.t - g.origin) / tau));
      if (k >= 1 && k <= steps) idx.insert(k - 1);
    }
    g.observed.assign(idx.begin(), idx.end());
  }
  return g;
}

/// Episode usable for training: both channels present.
inline void require_training(const Episode& ep) {
  if (!ep.has_brac()) throw ValidationError("episode '" + ep.id + "' has no BrAC samples");
  if (!ep.has_tac()) throw ValidationError("episode '" + ep.id + "' has no TAC samples");
  if (ep.brac.size() < 2 || ep.tac.size() < 2) {
    throw ValidationError("episode '" + ep.id + "' needs at least two samples per channel");
  }
}

/// Writes named columns of equal length as CSV with full precision.
inline void write_columns(std::ostream& out, const std::vector<std::string>& names,
                          const std::vector<Eigen::VectorXd>& cols) {
  if (names.size() != cols.size()) throw InputError("column names and data disagree");
  for (std::size_t i = 0; i < names.size(); ++i) out << (i ? "," : "") << names[i];
  out << '\n';
  const Eigen::Index rows = cols.empty() ? 0 : cols.front().size();
  for (const auto& c : cols) {
    if (c.size() != rows) throw InputError("columns differ in length");
  }
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      out << (i ? "," : "") << detail::format_full(cols[i](r));
    }
    out << '\n';
  }
}

inline void write_columns(const std::string& path, const std::vector<std::string>& names,
                          const std::vector<Eigen::VectorXd>& cols) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  write_columns(out, names, cols);
}

/// Reads a numeric CSV with a header row into named columns.
inline std::map<std::string, Eigen::VectorXd> read_columns(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> data;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string trimmed = detail::trim_ws(line);
    if (trimmed.empty()) continue;
    const auto fields = detail::split_csv(trimmed);
    if (names.empty()) {
      names = fields;
      data.resize(names.size());
      continue;
    }
    if (fields.size() != names.size()) {
      throw ParseError("expected " + std::to_string(names.size()) + " fields", lineno);
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
      data[i].push_back(detail::parse_number(fields[i], lineno, "number"));
    }
  }
  if (names.empty()) throw ParseError("empty file: missing header");
  std::map<std::string, Eigen::VectorXd> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    out[names[i]] = Eigen::Map<Eigen::VectorXd>(data[i].data(), data[i].size());
  }
  return out;
}

}  // namespace tacbrac
