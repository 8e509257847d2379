#pragma once

#include "ssmfit/linalg.hpp"

namespace ssmfit {

/// Value function v(theta) with its derivatives and inner-solve diagnostics.
struct ValueReport {
  double v = 0;
  Vec grad;
  Mat hess;  // empty when the Hessian was not requested
  int inner_iters = 0;
  bool converged = false;
  /// The inner Hessian was positive definite at the solution without the
  /// curvature safeguard. When false, `hess` comes from boosted curvature.
  bool hess_psd = true;
  /// Stacked inner solution, reusable as a warm start.
  Vec solution;

  bool has_hessian() const { return hess.size() > 0 || grad.size() == 0; }
};

/// Tolerances of the inner (state / saddle) Newton solves. The stationarity
/// tolerance is tol_scale * (1 + |z|_inf).
struct InnerOptions {
  double tol_scale = 1e-9;
  int max_iters = 100;
  double armijo_c = 1e-4;
  int max_halvings = 60;
};

}  // namespace ssmfit
