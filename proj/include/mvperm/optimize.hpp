#pragma once

#include <cmath>
#include <limits>
#include <utility>

#include "mvperm/linalg.hpp"

namespace mvperm {

struct BfgsOptions {
  int max_iterations = 200;
  /// Converged when max |grad| <= gradient_tolerance * max(1, |f|).
  double gradient_tolerance = 1e-8;
  /// Largest allowed max-abs step in the free parameters.
  double max_step = 5.0;
};

struct BfgsResult {
  Vector x;
  double value = -std::numeric_limits<double>::infinity();
  Vector gradient;
  int iterations = 0;
  bool converged = false;
};

/// Maximizes f by BFGS with Armijo backtracking. `f(x, grad)` returns the
/// objective and writes the gradient into `grad`. Every accepted step
/// increases f.
template <class Objective>
BfgsResult maximize_bfgs(Objective&& f, Vector x0, const BfgsOptions& opts = {}) {
  const Index n = x0.size();
  BfgsResult r;
  r.x = std::move(x0);
  r.gradient = Vector::Zero(n);
  if (n == 0) {
    r.value = f(r.x, r.gradient);
    r.converged = true;
    return r;
  }
  r.value = f(r.x, r.gradient);
  if (!std::isfinite(r.value)) return r;

  auto small_gradient = [&](const Vector& g, double v) {
    return g.cwiseAbs().maxCoeff() <= opts.gradient_tolerance * std::max(1.0, std::abs(v));
  };

  Matrix h = Matrix::Identity(n, n);  // approximates (-Hessian)^-1
  bool fresh = true;
  Vector g_new(n);
  for (r.iterations = 0; r.iterations < opts.max_iterations; ++r.iterations) {
    if (small_gradient(r.gradient, r.value)) {
      r.converged = true;
      return r;
    }
    Vector d = h * r.gradient;
    double slope = r.gradient.dot(d);
    if (!(slope > 0.0)) {
      h.setIdentity();
      fresh = true;
      d = r.gradient;
      slope = d.squaredNorm();
    }
    const double dmax = d.cwiseAbs().maxCoeff();
    if (dmax > opts.max_step) {
      d *= opts.max_step / dmax;
      slope *= opts.max_step / dmax;
    }

    double step = 1.0;
    bool accepted = false;
    Vector x_new(n);
    double f_new = 0.0;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = r.x + step * d;
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new >= r.value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!fresh) {
        h.setIdentity();
        fresh = true;
        continue;
      }
      // No ascent along the gradient either: at a numerical optimum when the
      // gradient is small relative to the attainable precision.
      r.converged = r.gradient.cwiseAbs().maxCoeff() <= 1e-5 * std::max(1.0, std::abs(r.value));
      return r;
    }

    const Vector s = x_new - r.x;
    const Vector y = r.gradient - g_new;  // gradient change of -f
    const double sy = s.dot(y);
    if (sy > 1e-14 * s.norm() * y.norm()) {
      if (fresh) h *= sy / y.squaredNorm();
      const double rho = 1.0 / sy;
      const Matrix eye = Matrix::Identity(n, n);
      h = (eye - rho * s * y.transpose()) * h * (eye - rho * y * s.transpose()) +
          rho * s * s.transpose();
      fresh = false;
    }
    const double gain = f_new - r.value;
    r.x = std::move(x_new);
    r.value = f_new;
    r.gradient = g_new;
    if (s.cwiseAbs().maxCoeff() < 1e-12 && gain <= 1e-15 * std::max(1.0, std::abs(r.value))) {
      r.converged = small_gradient(r.gradient, r.value) ||
                    r.gradient.cwiseAbs().maxCoeff() <= 1e-5 * std::max(1.0, std::abs(r.value));
      return r;
    }
  }
  r.converged = small_gradient(r.gradient, r.value);
  return r;
}

}  // namespace mvperm
