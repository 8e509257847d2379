#include "ssmfit/smoother.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ssmfit/errors.hpp"

namespace ssmfit {

namespace {

std::size_t idx(Index k) { return static_cast<std::size_t>(k); }

double inf_norm(const VecRef& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

}  // namespace

struct NonsingularSmoother::Whitened {
  Assembly ops;
  Vec r_p;
  Vec r_m;
};

NonsingularSmoother::NonsingularSmoother(SsmProblem problem, InnerOptions opts)
    : problem_(std::move(problem)), opts_(opts) {
  problem_.validate();
  if (!problem_.q_factor.invertible() || !problem_.r_factor.invertible()) {
    throw SingularCovariance("nonsingular smoother needs square invertible covariance factors");
  }
  for (Index k = 0; k < problem_.horizon(); ++k) {
    q_inv_.push_back(problem_.q_factor.block(k).inverse());
    r_inv_.push_back(problem_.r_factor.block(k).inverse());
  }
  tol_ = opts_.tol_scale * (1.0 + inf_norm(problem_.z));
}

NonsingularSmoother::Whitened NonsingularSmoother::whiten(const VecRef& theta, const VecRef& x) const {
  Assembly ops = assemble(problem_, theta);
  if (x.size() != ops.dynamics.dim()) throw DimensionMismatch("state stack size mismatch");
  const Vec ep = ops.dynamics.apply(x) - ops.zeta;
  const Vec em = ops.measurement.apply(x) - problem_.z;
  const Index n = problem_.state_dim();
  const Index m = problem_.meas_dim();
  Vec rp(ep.size()), rm(em.size());
  for (Index k = 0; k < problem_.horizon(); ++k) {
    rp.segment(k * n, n).noalias() = q_inv_[idx(k)] * ep.segment(k * n, n);
    rm.segment(k * m, m).noalias() = r_inv_[idx(k)] * em.segment(k * m, m);
  }
  return {std::move(ops), std::move(rp), std::move(rm)};
}

ResidualPair NonsingularSmoother::residuals(const VecRef& theta, const VecRef& x) const {
  Whitened w = whiten(theta, x);
  return {std::move(w.r_p), std::move(w.r_m)};
}

double NonsingularSmoother::objective(const VecRef& theta, const VecRef& x) const {
  const Whitened w = whiten(theta, x);
  return loss_value(problem_.loss_p, w.r_p) + loss_value(problem_.loss_m, w.r_m);
}

namespace {

// B^{-T} applied blockwise to a whitened stack.
Vec unwhiten_transpose(const std::vector<Mat>& inv, const Vec& r, Index dim) {
  Vec out(r.size());
  for (std::size_t k = 0; k < inv.size(); ++k) {
    const Index off = static_cast<Index>(k) * dim;
    out.segment(off, dim).noalias() = inv[k].transpose() * r.segment(off, dim);
  }
  return out;
}

}  // namespace

Vec NonsingularSmoother::stationarity(const VecRef& theta, const VecRef& x) const {
  const Whitened w = whiten(theta, x);
  const Vec bar_p = unwhiten_transpose(q_inv_, loss_grad(problem_.loss_p, w.r_p), problem_.state_dim());
  const Vec bar_m = unwhiten_transpose(r_inv_, loss_grad(problem_.loss_m, w.r_m), problem_.meas_dim());
  return w.ops.dynamics.transpose_apply(bar_p) + w.ops.measurement.transpose_apply(bar_m);
}

BlockTridiag NonsingularSmoother::state_hessian(const VecRef& theta, const VecRef& curv_p,
                                                const VecRef& curv_m) const {
  const Index n_steps = problem_.horizon();
  const Index n = problem_.state_dim();
  const Index m = problem_.meas_dim();
  const Assembly ops = assemble(problem_, theta);
  std::vector<Mat> wp(idx(n_steps));
  std::vector<Mat> diag(idx(n_steps));
  std::vector<Mat> lower;
  lower.reserve(idx(n_steps > 0 ? n_steps - 1 : 0));
  for (Index k = 0; k < n_steps; ++k) {
    const Mat& a = q_inv_[idx(k)];
    wp[idx(k)] = a.transpose() * curv_p.segment(k * n, n).asDiagonal() * a;
    const Mat& b = r_inv_[idx(k)];
    const Mat& h = ops.measurement.block(k);
    diag[idx(k)] = wp[idx(k)] + h.transpose() * (b.transpose() * curv_m.segment(k * m, m).asDiagonal() * b) * h;
  }
  for (Index k = 1; k < n_steps; ++k) {
    const Mat& g = ops.dynamics.transition(k);
    diag[idx(k - 1)] += g.transpose() * wp[idx(k)] * g;
    lower.push_back(-wp[idx(k)] * g);
  }
  return BlockTridiag(std::move(diag), std::move(lower));
}

StateSolution NonsingularSmoother::solve_states(const VecRef& theta, const VecRef& x_init) const {
  StateSolution sol;
  sol.x = x_init;
  for (int it = 0;; ++it) {
    const Whitened w = whiten(theta, sol.x);
    const Vec bar_p = unwhiten_transpose(q_inv_, loss_grad(problem_.loss_p, w.r_p), problem_.state_dim());
    const Vec bar_m = unwhiten_transpose(r_inv_, loss_grad(problem_.loss_m, w.r_m), problem_.meas_dim());
    const Vec grad = w.ops.dynamics.transpose_apply(bar_p) + w.ops.measurement.transpose_apply(bar_m);
    sol.stationarity = inf_norm(grad);
    sol.iterations = it;
    if (sol.stationarity <= tol_) return sol;
    if (!std::isfinite(sol.stationarity)) {
      throw MaxIterations("state Newton solve diverged after " + std::to_string(it) + " iterations");
    }
    if (it >= opts_.max_iters) {
      throw MaxIterations("state Newton solve did not converge in " + std::to_string(opts_.max_iters) +
                          " iterations (|f_x| = " + std::to_string(sol.stationarity) + ")");
    }

    bool bp = false, bm = false;
    const Vec cp = safeguarded_hess_diag(problem_.loss_p, w.r_p, &bp);
    const Vec cm = safeguarded_hess_diag(problem_.loss_m, w.r_m, &bm);
    sol.boosted = sol.boosted || bp || bm;
    Vec step;
    if (bp || bm) {
      // The exact Hessian can be PD even with some negative curvature entries;
      // when it is, its step converges quadratically.
      try {
        const TridiagFactor exact(state_hessian(theta, loss_hess_diag(problem_.loss_p, w.r_p),
                                                loss_hess_diag(problem_.loss_m, w.r_m)));
        if (exact.positive_definite()) step = -exact.solve(grad);
      } catch (const SingularSystem&) {
      }
    }
    if (step.size() == 0) step = -tridiag_factor_solve(state_hessian(theta, cp, cm), grad);

    const double f0 = loss_value(problem_.loss_p, w.r_p) + loss_value(problem_.loss_m, w.r_m);
    const double slope = grad.dot(step);
    // Below the rounding level of f the Armijo test is meaningless.
    if (-slope <= 1e-13 * (1.0 + std::abs(f0))) {
      sol.x += step;
      continue;
    }
    double t = 1.0;
    int halvings = 0;
    for (;; ++halvings) {
      const Vec trial = sol.x + t * step;
      const double f = objective(theta, trial);
      if (std::isfinite(f) && f <= f0 + opts_.armijo_c * t * slope) {
        sol.x = trial;
        break;
      }
      if (halvings >= opts_.max_halvings) {
        throw MaxIterations("state Newton line search stalled at |f_x| = " + std::to_string(sol.stationarity));
      }
      t *= 0.5;
    }
  }
}

ValueReport NonsingularSmoother::value_report(const VecRef& theta, const std::optional<Vec>& warm_start,
                                              bool want_hessian) const {
  const Vec x_init = warm_start ? *warm_start : propagate_states(problem_, theta);
  const StateSolution sol = solve_states(theta, x_init);
  const Vec& x = sol.x;
  const Whitened w = whiten(theta, x);

  ValueReport rep;
  rep.v = loss_value(problem_.loss_p, w.r_p) + loss_value(problem_.loss_m, w.r_m);
  rep.inner_iters = sol.iterations;
  rep.converged = true;
  rep.solution = x;

  const Index n = problem_.state_dim();
  const Index m = problem_.meas_dim();
  const Vec bar_p = unwhiten_transpose(q_inv_, loss_grad(problem_.loss_p, w.r_p), n);
  const Vec bar_m = unwhiten_transpose(r_inv_, loss_grad(problem_.loss_m, w.r_m), m);
  const Mat jg = jac_apply_states(problem_, x);
  const Mat jh = jac_apply_states_h(problem_, x);
  rep.grad = jg.transpose() * bar_p + jh.transpose() * bar_m;
  if (!want_hessian) return rep;

  Vec cp = loss_hess_diag(problem_.loss_p, w.r_p);
  Vec cm = loss_hess_diag(problem_.loss_m, w.r_m);
  std::optional<TridiagFactor> factor;
  try {
    factor.emplace(state_hessian(theta, cp, cm));
    if (!factor->positive_definite()) rep.hess_psd = false;
  } catch (const SingularSystem&) {
    rep.hess_psd = false;
  }
  if (!rep.hess_psd) {
    cp = safeguarded_hess_diag(problem_.loss_p, w.r_p);
    cm = safeguarded_hess_diag(problem_.loss_m, w.r_m);
    try {
      factor.emplace(state_hessian(theta, cp, cm));
    } catch (const SingularSystem& e) {
      throw HessianSingular(std::string("state Hessian singular even after boosting: ") + e.what());
    }
  }

  // Weighted Jacobians W (G x)_theta and W (H x)_theta, W = B^{-T} diag(l'') B^{-1}.
  Mat wjg(jg.rows(), jg.cols());
  Mat wjh(jh.rows(), jh.cols());
  for (Index k = 0; k < problem_.horizon(); ++k) {
    const Mat& a = q_inv_[idx(k)];
    const Mat& b = r_inv_[idx(k)];
    wjg.middleRows(k * n, n) = a.transpose() * (cp.segment(k * n, n).asDiagonal() * (a * jg.middleRows(k * n, n)));
    wjh.middleRows(k * m, m) = b.transpose() * (cm.segment(k * m, m).asDiagonal() * (b * jh.middleRows(k * m, m)));
  }
  const Mat f_tt = jg.transpose() * wjg + jh.transpose() * wjh;
  const Mat h_t = jac_apply_duals(problem_, bar_p) + w.ops.dynamics.transpose_apply(wjg) +
                  jac_apply_duals_h(problem_, bar_m) + w.ops.measurement.transpose_apply(wjh);
  const Mat hess = f_tt - h_t.transpose() * factor->solve(h_t);
  rep.hess = 0.5 * (hess + hess.transpose());
  return rep;
}

StateSolution solve_states(const SsmProblem& problem, const VecRef& theta, const VecRef& x_init) {
  return NonsingularSmoother(problem).solve_states(theta, x_init);
}

ValueReport value_report(const SsmProblem& problem, const VecRef& theta, const std::optional<Vec>& warm_start) {
  return NonsingularSmoother(problem).value_report(theta, warm_start);
}

}  // namespace ssmfit
