#pragma once

#include <optional>

#include "ssmfit/model.hpp"
#include "ssmfit/value_report.hpp"

namespace ssmfit {

/// Unknowns of the constrained formulation
///
///   min l_p(r_p) + l_m(r_m)  s.t.  Bq r_p = G(theta) x - zeta,  Br r_m = H(theta) x - z
///
/// together with the multipliers of both constraint blocks.
struct SaddleState {
  Vec x;
  Vec r_p;
  Vec r_m;
  Vec lam_p;
  Vec lam_m;

  Vec stacked() const;
  static SaddleState from_stacked(const BlockLayout& layout, const VecRef& y);
};

struct SaddleSolution {
  SaddleState y;
  int iterations = 0;
  double kkt_residual = 0;  // |f_y|_inf at y
  bool boosted = false;     // non-PSD loss curvature was lifted during the solve
};

struct LsDualSolution {
  Vec lam_m;
  Vec lam_p;
  double v = 0;
};

/// Smoother for possibly singular covariances. The value function is the
/// saddle value of the Lagrangian
///
///   L = l_p(r_p) + l_m(r_m) - <lam_p, Bq r_p - G x + zeta> - <lam_m, Br r_m - H x + z>,
///
/// found by Newton iterations on the augmented Lagrangian (penalty weight 1).
/// Derivatives come from the exact KKT matrix f_yy.
class SingularSmoother {
 public:
  explicit SingularSmoother(SsmProblem problem, InnerOptions opts = default_options());
  static InnerOptions default_options() {
    InnerOptions o;
    o.max_iters = 200;
    return o;
  }

  const SsmProblem& problem() const { return problem_; }
  double tolerance() const { return tol_; }
  /// Blocks x, r_p, r_m, lam_p, lam_m of the stacked unknowns.
  const BlockLayout& layout() const { return layout_; }

  /// States propagated from x_0, zero residuals and zero multipliers.
  SaddleState cold_start(const VecRef& theta) const;

  /// The five-block stationarity map f_y.
  Vec kkt_residual(const VecRef& theta, const SaddleState& y) const;
  /// Constraint values (Bq r_p - G x + zeta, Br r_m - H x + z).
  Vec constraint(const VecRef& theta, const SaddleState& y) const;
  double lagrangian(const VecRef& theta, const SaddleState& y) const;
  double augmented_lagrangian(const VecRef& theta, const SaddleState& y) const;
  Vec al_gradient(const VecRef& theta, const SaddleState& y) const;

  /// Exact KKT matrix at y. With `safeguard`, Student's t curvature is lifted
  /// to the PSD floor first and `boosted` reports whether that happened.
  KktSystem kkt_system(const VecRef& theta, const SaddleState& y, bool safeguard, bool* boosted = nullptr) const;
  /// Solves AL_yy d = rhs. Because the constraints are linear, AL_yy differs
  /// from f_yy only by J^T J in the primal block, so the system reduces to an
  /// f_yy solve with the primal rows shifted by J^T rhs_lambda.
  Mat al_hessian_solve(const KktSystem& kkt, const MatRef& rhs) const;

  /// Throws MaxIterations or SchurSingular.
  SaddleSolution solve_saddle(const VecRef& theta, const SaddleState& init) const;

  ValueReport value_report(const VecRef& theta, const std::optional<Vec>& warm_start = std::nullopt,
                           bool want_hessian = true) const;

  /// v_theta rebuilt from an optimal state stack only, with
  /// lam_m = R^{-T/2} l_m'(R^{-1/2}(H x - z)) and lam_p = -G^{-T} H^T lam_m.
  /// Throws SingularCovariance when R is not invertible.
  Vec primal_grad_invertible_r(const VecRef& theta, const VecRef& x) const;

  /// Closed-form multipliers for least-squares losses from the dense dual
  /// system (H G^{-1} Q G^{-T} H^T + R). Throws DualSingular.
  LsDualSolution ls_dual_solve(const VecRef& theta) const;

 private:
  Vec apply_jc_transpose(const BlockBidiag& g, const BlockDiag& h, const VecRef& g_lambda) const;

  SsmProblem problem_;
  InnerOptions opts_;
  double tol_;
  BlockLayout layout_;
};

SaddleSolution solve_saddle(const SsmProblem& problem, const VecRef& theta, const SaddleState& init);
ValueReport value_report_singular(const SsmProblem& problem, const VecRef& theta,
                                  const std::optional<Vec>& warm_start = std::nullopt);
Vec primal_grad_invertible_r(const SsmProblem& problem, const VecRef& theta, const VecRef& x);
LsDualSolution ls_dual_solve(const SsmProblem& problem, const VecRef& theta);

}  // namespace ssmfit
