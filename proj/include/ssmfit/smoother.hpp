#pragma once

#include <optional>

#include "ssmfit/model.hpp"
#include "ssmfit/value_report.hpp"

namespace ssmfit {

struct StateSolution {
  Vec x;
  int iterations = 0;
  double stationarity = 0;  // |f_x|_inf at x
  bool boosted = false;     // a Student's t curvature safeguard fired
};

/// Smoother for invertible Q_k, R_k: minimizes the pre-whitened objective
///
///   f(theta, x) = l_p(Q^{-1/2}(G(theta) x - zeta)) + l_m(R^{-1/2}(H(theta) x - z))
///
/// over the state stack by Newton's method on the block-tridiagonal state
/// Hessian, and differentiates v(theta) = f(theta, x(theta)) implicitly.
class NonsingularSmoother {
 public:
  /// Throws SingularCovariance when some factor block is not square and invertible.
  explicit NonsingularSmoother(SsmProblem problem, InnerOptions opts = {});

  const SsmProblem& problem() const { return problem_; }
  double tolerance() const { return tol_; }

  double objective(const VecRef& theta, const VecRef& x) const;
  /// Stationarity map f_x(theta, x) = G^T Q^{-T/2} l_p'(r_p) + H^T R^{-T/2} l_m'(r_m).
  Vec stationarity(const VecRef& theta, const VecRef& x) const;
  /// State Hessian f_xx with the given diagonal loss curvatures.
  BlockTridiag state_hessian(const VecRef& theta, const VecRef& curv_p, const VecRef& curv_m) const;
  ResidualPair residuals(const VecRef& theta, const VecRef& x) const;

  /// Throws MaxIterations (cap InnerOptions::max_iters) or SingularSystem.
  StateSolution solve_states(const VecRef& theta, const VecRef& x_init) const;

  /// Without a warm start the states are initialized by propagating x_0
  /// through the dynamics.
  ValueReport value_report(const VecRef& theta, const std::optional<Vec>& warm_start = std::nullopt,
                           bool want_hessian = true) const;

 private:
  struct Whitened;
  Whitened whiten(const VecRef& theta, const VecRef& x) const;

  SsmProblem problem_;
  InnerOptions opts_;
  double tol_;
  std::vector<Mat> q_inv_;
  std::vector<Mat> r_inv_;
};

StateSolution solve_states(const SsmProblem& problem, const VecRef& theta, const VecRef& x_init);
ValueReport value_report(const SsmProblem& problem, const VecRef& theta,
                         const std::optional<Vec>& warm_start = std::nullopt);

}  // namespace ssmfit
