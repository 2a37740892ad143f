#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <utility>
#include <vector>

#include "tacbrac/error.hpp"

namespace tacbrac::quad {

/// Gauss-Legendre rule on [-1, 1].
struct GaussRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

namespace detail {

inline GaussRule compute_gauss_legendre(int order) {
  GaussRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  if (order == 1) {
    rule.nodes[0] = 0.0;
    rule.weights[0] = 2.0;
    return rule;
  }
  const int half = (order + 1) / 2;
  for (int i = 0; i < half; ++i) {
    // Tricomi initial guess, then Newton on P_order.
    double x = std::cos(std::numbers::pi * (i + 0.75) / (order + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0;
      double p1 = x;
      for (int k = 2; k <= order; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = order * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // Recompute the derivative at the converged node.
    double p0 = 1.0;
    double p1 = x;
    for (int k = 2; k <= order; ++k) {
      const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = p2;
    }
    dp = order * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    rule.nodes[i] = -x;
    rule.nodes[order - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[order - 1 - i] = w;
  }
  return rule;
}

}  // namespace detail

/// Cached Gauss-Legendre rule of the given order (order >= 1).
inline const GaussRule& gauss_legendre(int order) {
  if (order < 1) throw DomainError("Gauss-Legendre order must be >= 1");
  static std::mutex mutex;
  static std::map<int, GaussRule> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(order);
  if (it == cache.end()) {
    it = cache.emplace(order, detail::compute_gauss_legendre(order)).first;
  }
  return it->second;
}

/// Axis-aligned rectangle [x0, x1] x [y0, y1].
struct Box {
  double x0, x1, y0, y1;
};

/// Tensor-product Gauss-Legendre rule over a box.
template <class F>
double tensor_gauss(F&& f, const Box& box, int order) {
  const GaussRule& rule = gauss_legendre(order);
  const double hx = 0.5 * (box.x1 - box.x0);
  const double cx = 0.5 * (box.x1 + box.x0);
  const double hy = 0.5 * (box.y1 - box.y0);
  const double cy = 0.5 * (box.y1 + box.y0);
  double sum = 0.0;
  for (int i = 0; i < order; ++i) {
    const double x = cx + hx * rule.nodes[i];
    double row = 0.0;
    for (int j = 0; j < order; ++j) {
      row += rule.weights[j] * f(x, cy + hy * rule.nodes[j]);
    }
    sum += rule.weights[i] * row;
  }
  return sum * hx * hy;
}

/// Gauss-Legendre integral of a 1-D function over [a, b].
template <class F>
double gauss_1d(F&& f, double a, double b, int order) {
  const GaussRule& rule = gauss_legendre(order);
  const double h = 0.5 * (b - a);
  const double c = 0.5 * (b + a);
  double sum = 0.0;
  for (int i = 0; i < order; ++i) sum += rule.weights[i] * f(c + h * rule.nodes[i]);
  return sum * h;
}

namespace detail {

template <class F>
double adaptive_box(F& f, const Box& box, double whole, double tol, int order,
                    int depth) {
  const double mx = 0.5 * (box.x0 + box.x1);
  const double my = 0.5 * (box.y0 + box.y1);
  const Box q[4] = {{box.x0, mx, box.y0, my},
                    {mx, box.x1, box.y0, my},
                    {box.x0, mx, my, box.y1},
                    {mx, box.x1, my, box.y1}};
  double parts[4];
  double split = 0.0;
  for (int k = 0; k < 4; ++k) {
    parts[k] = tensor_gauss(f, q[k], order);
    split += parts[k];
  }
  const double noise = 1e3 * std::numeric_limits<double>::epsilon() * std::abs(split);
  if (std::abs(split - whole) <= std::max(tol, noise) || depth >= 14) return split;
  double sum = 0.0;
  for (int k = 0; k < 4; ++k) {
    sum += adaptive_box(f, q[k], parts[k], 0.25 * tol, order, depth + 1);
  }
  return sum;
}

}  // namespace detail

/// Adaptive 2-D Gauss-Legendre quadrature: recursively quarters the box until
/// the parent and the sum of its children agree to `tol`.
template <class F>
double adaptive_2d(F&& f, const Box& box, double tol = 1e-13, int order = 8) {
  const double whole = tensor_gauss(f, box, order);
  return detail::adaptive_box(f, box, whole, tol, order, 0);
}

}  // namespace tacbrac::quad
