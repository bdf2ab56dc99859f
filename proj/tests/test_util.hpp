#pragma once

// Shared test oracles.  These stay independent of the expression-node
// implementations they check: everything here is plain finite differences
// or direct evaluation.

#include <functional>
#include <vector>

#include "pertkit/core.hpp"

namespace testutil {

using pertkit::core::Mat;
using pertkit::core::SmoothMap;
using pertkit::core::Vec;

// central finite-difference Jacobian
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x,
                       double h = 1e-5) {
  const int d = static_cast<int>(x.size());
  Vec fx = f(x);
  Mat j(fx.size(), d);
  for (int i = 0; i < d; ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    j.col(i) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return j;
}

inline Mat fd_jacobian(const SmoothMap& f, const Vec& x, double h = 1e-5) {
  return fd_jacobian([&](const Vec& y) { return f(y); }, x, h);
}

// central finite-difference derivative of a scalar function
inline double fd_deriv(const std::function<double(double)>& f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double got, double want) {
  double denom = std::max(std::abs(want), 1e-300);
  return std::abs(got - want) / denom;
}

inline double mat_rel_err(const Mat& got, const Mat& want) {
  double denom = std::max(want.norm(), 1e-12);
  return (got - want).norm() / denom;
}

}  // namespace testutil
