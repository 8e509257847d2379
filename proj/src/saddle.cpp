#include "ssmfit/saddle.hpp"

#include <cmath>
#include <string>

#include "ssmfit/errors.hpp"

namespace ssmfit {

namespace {

double inf_norm(const VecRef& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

enum Block : Index { kX = 0, kRp = 1, kRm = 2, kLp = 3, kLm = 4 };

}  // namespace

Vec SaddleState::stacked() const {
  Vec y(x.size() + r_p.size() + r_m.size() + lam_p.size() + lam_m.size());
  y << x, r_p, r_m, lam_p, lam_m;
  return y;
}

SaddleState SaddleState::from_stacked(const BlockLayout& layout, const VecRef& y) {
  if (y.size() != layout.total()) throw DimensionMismatch("SaddleState::from_stacked: size mismatch");
  auto part = [&](Index b) { return Vec(y.segment(layout.offset(b), layout.size(b))); };
  return {part(kX), part(kRp), part(kRm), part(kLp), part(kLm)};
}

SingularSmoother::SingularSmoother(SsmProblem problem, InnerOptions opts)
    : problem_(std::move(problem)), opts_(opts) {
  problem_.validate();
  tol_ = opts_.tol_scale * (1.0 + inf_norm(problem_.z));
  const Index nx = problem_.horizon() * problem_.state_dim();
  layout_ = BlockLayout({nx, problem_.q_factor.col_layout().total(), problem_.r_factor.col_layout().total(), nx,
                         problem_.horizon() * problem_.meas_dim()});
}

SaddleState SingularSmoother::cold_start(const VecRef& theta) const {
  SaddleState y;
  y.x = propagate_states(problem_, theta);
  y.r_p = Vec::Zero(layout_.size(kRp));
  y.r_m = Vec::Zero(layout_.size(kRm));
  y.lam_p = Vec::Zero(layout_.size(kLp));
  y.lam_m = Vec::Zero(layout_.size(kLm));
  return y;
}

Vec SingularSmoother::constraint(const VecRef& theta, const SaddleState& y) const {
  const Assembly ops = assemble(problem_, theta);
  Vec c(layout_.size(kLp) + layout_.size(kLm));
  c << problem_.q_factor.apply(y.r_p) - ops.dynamics.apply(y.x) + ops.zeta,
      problem_.r_factor.apply(y.r_m) - ops.measurement.apply(y.x) + problem_.z;
  return c;
}

Vec SingularSmoother::kkt_residual(const VecRef& theta, const SaddleState& y) const {
  const Assembly ops = assemble(problem_, theta);
  Vec f(layout_.total());
  f << ops.dynamics.transpose_apply(y.lam_p) + ops.measurement.transpose_apply(y.lam_m),
      loss_grad(problem_.loss_p, y.r_p) - problem_.q_factor.transpose_apply(y.lam_p),
      loss_grad(problem_.loss_m, y.r_m) - problem_.r_factor.transpose_apply(y.lam_m),
      ops.dynamics.apply(y.x) - ops.zeta - problem_.q_factor.apply(y.r_p),
      ops.measurement.apply(y.x) - problem_.z - problem_.r_factor.apply(y.r_m);
  return f;
}

double SingularSmoother::lagrangian(const VecRef& theta, const SaddleState& y) const {
  const Vec c = constraint(theta, y);
  const Index np = layout_.size(kLp);
  return loss_value(problem_.loss_p, y.r_p) + loss_value(problem_.loss_m, y.r_m) - y.lam_p.dot(c.head(np)) -
         y.lam_m.dot(c.tail(c.size() - np));
}

double SingularSmoother::augmented_lagrangian(const VecRef& theta, const SaddleState& y) const {
  return lagrangian(theta, y) + 0.5 * constraint(theta, y).squaredNorm();
}

Vec SingularSmoother::apply_jc_transpose(const BlockBidiag& g, const BlockDiag& h, const VecRef& g_lambda) const {
  // Constraint Jacobian J = [[-G, Bq, 0], [-H, 0, Br]] in (x, r_p, r_m).
  const Index np = layout_.size(kLp);
  const Vec a = g_lambda.head(np);
  const Vec b = g_lambda.tail(g_lambda.size() - np);
  Vec out(layout_.offset(kLp));
  out << -g.transpose_apply(a) - h.transpose_apply(b), problem_.q_factor.transpose_apply(a),
      problem_.r_factor.transpose_apply(b);
  return out;
}

Vec SingularSmoother::al_gradient(const VecRef& theta, const SaddleState& y) const {
  const Assembly ops = assemble(problem_, theta);
  Vec g = kkt_residual(theta, y);
  g.head(layout_.offset(kLp)) += apply_jc_transpose(ops.dynamics, ops.measurement, constraint(theta, y));
  return g;
}

KktSystem SingularSmoother::kkt_system(const VecRef& theta, const SaddleState& y, bool safeguard,
                                       bool* boosted) const {
  Assembly ops = assemble(problem_, theta);
  bool bp = false, bm = false;
  Vec cp = safeguard ? safeguarded_hess_diag(problem_.loss_p, y.r_p, &bp) : loss_hess_diag(problem_.loss_p, y.r_p);
  Vec cm = safeguard ? safeguarded_hess_diag(problem_.loss_m, y.r_m, &bm) : loss_hess_diag(problem_.loss_m, y.r_m);
  if (boosted != nullptr) *boosted = bp || bm;
  return KktSystem(KktBlocks{std::move(ops.dynamics), std::move(ops.measurement), problem_.q_factor,
                             problem_.r_factor, std::move(cp), std::move(cm)});
}

Mat SingularSmoother::al_hessian_solve(const KktSystem& kkt, const MatRef& rhs) const {
  if (rhs.rows() != layout_.total()) throw DimensionMismatch("al_hessian_solve: rhs size mismatch");
  const Index primal = layout_.offset(kLp);
  const Index dual = layout_.total() - primal;
  const auto& blocks = kkt.blocks();
  Mat shifted = rhs;
  for (Index c = 0; c < rhs.cols(); ++c) {
    shifted.col(c).head(primal) += apply_jc_transpose(blocks.dynamics, blocks.measurement, rhs.col(c).tail(dual));
  }
  return kkt.solve(shifted);
}

SaddleSolution SingularSmoother::solve_saddle(const VecRef& theta, const SaddleState& init) const {
  SaddleSolution sol;
  sol.y = init;
  const Index primal = layout_.offset(kLp);
  for (int it = 0;; ++it) {
    const Vec f = kkt_residual(theta, sol.y);
    sol.kkt_residual = inf_norm(f);
    sol.iterations = it;
    if (sol.kkt_residual <= tol_) return sol;
    if (!std::isfinite(sol.kkt_residual)) {
      throw MaxIterations("saddle Newton solve diverged after " + std::to_string(it) + " iterations");
    }
    if (it >= opts_.max_iters) {
      throw MaxIterations("saddle Newton solve did not converge in " + std::to_string(opts_.max_iters) +
                          " iterations (|f_y| = " + std::to_string(sol.kkt_residual) + ")");
    }

    bool boosted = false;
    const Vec rhs = -al_gradient(theta, sol.y);
    const KktSystem kkt = kkt_system(theta, sol.y, /*safeguard=*/true, &boosted);
    sol.boosted = sol.boosted || boosted;
    const Vec step = al_hessian_solve(kkt, rhs);

    // A full step lands on the (linear) constraint manifold.
    const bool feasible = inf_norm(f.tail(f.size() - primal)) <= tol_;
    if (!feasible) {
      sol.y = SaddleState::from_stacked(layout_, sol.y.stacked() + step);
      continue;
    }

    // Feasible iterate: the primal step lies in the constraint null space and
    // is a descent direction for l_p + l_m there. Armijo on that objective.
    const Vec gp = loss_grad(problem_.loss_p, sol.y.r_p);
    const Vec gm = loss_grad(problem_.loss_m, sol.y.r_m);
    auto slope_of = [&](const SaddleState& e) { return gp.dot(e.r_p) + gm.dot(e.r_m); };
    SaddleState d = SaddleState::from_stacked(layout_, step);
    double slope = slope_of(d);
    if (boosted) {
      // Near a minimizer the exact step converges quadratically and is still a
      // descent direction even where some curvature entries are negative.
      try {
        const SaddleState e = SaddleState::from_stacked(layout_, al_hessian_solve(kkt_system(theta, sol.y, false), rhs));
        const double se = slope_of(e);
        if (e.x.allFinite() && se < 0) {
          d = e;
          slope = se;
        }
      } catch (const SchurSingular&) {
      }
    }
    const double phi0 = loss_value(problem_.loss_p, sol.y.r_p) + loss_value(problem_.loss_m, sol.y.r_m);
    double t = 1.0;
    if (-slope > 1e-13 * (1.0 + std::abs(phi0))) {
      for (int halvings = 0;; ++halvings) {
        const double phi =
            loss_value(problem_.loss_p, sol.y.r_p + t * d.r_p) + loss_value(problem_.loss_m, sol.y.r_m + t * d.r_m);
        if (std::isfinite(phi) && phi <= phi0 + opts_.armijo_c * t * slope) break;
        if (halvings >= opts_.max_halvings) {
          throw MaxIterations("saddle line search stalled at |f_y| = " + std::to_string(sol.kkt_residual));
        }
        t *= 0.5;
      }
    }
    sol.y.x += t * d.x;
    sol.y.r_p += t * d.r_p;
    sol.y.r_m += t * d.r_m;
    sol.y.lam_p += d.lam_p;
    sol.y.lam_m += d.lam_m;
  }
}

ValueReport SingularSmoother::value_report(const VecRef& theta, const std::optional<Vec>& warm_start,
                                           bool want_hessian) const {
  const SaddleState init =
      warm_start ? SaddleState::from_stacked(layout_, *warm_start) : cold_start(theta);
  const SaddleSolution sol = solve_saddle(theta, init);
  const SaddleState& y = sol.y;

  ValueReport rep;
  rep.v = lagrangian(theta, y);
  rep.inner_iters = sol.iterations;
  rep.converged = true;
  rep.solution = y.stacked();

  const Mat jg = jac_apply_states(problem_, y.x);
  const Mat jh = jac_apply_states_h(problem_, y.x);
  rep.grad = jg.transpose() * y.lam_p + jh.transpose() * y.lam_m;
  if (!want_hessian) return rep;

  const Vec cp = loss_hess_diag(problem_.loss_p, y.r_p);
  const Vec cm = loss_hess_diag(problem_.loss_m, y.r_m);
  const bool psd = (cp.size() == 0 || cp.minCoeff() >= kPsdFloor) && (cm.size() == 0 || cm.minCoeff() >= kPsdFloor);
  rep.hess_psd = psd;
  const KktSystem kkt = kkt_system(theta, y, /*safeguard=*/!psd);

  // H_theta = f_{y theta}: rows x, r_p, r_m, lam_p, lam_m.
  const Index p = problem_.n_params();
  Mat h_t = Mat::Zero(layout_.total(), p);
  h_t.middleRows(layout_.offset(kX), layout_.size(kX)) =
      jac_apply_duals(problem_, y.lam_p) + jac_apply_duals_h(problem_, y.lam_m);
  h_t.middleRows(layout_.offset(kLp), layout_.size(kLp)) = jg;
  h_t.middleRows(layout_.offset(kLm), layout_.size(kLm)) = jh;
  // f_theta theta vanishes for affine families.
  const Mat hess = -h_t.transpose() * kkt.solve(h_t);
  rep.hess = 0.5 * (hess + hess.transpose());
  return rep;
}

Vec SingularSmoother::primal_grad_invertible_r(const VecRef& theta, const VecRef& x) const {
  const CovFactor& br = problem_.r_factor;
  if (!br.invertible()) throw SingularCovariance("primal gradient needs an invertible R");
  const Assembly ops = assemble(problem_, theta);
  const Vec em = ops.measurement.apply(x) - problem_.z;
  const Index m = problem_.meas_dim();
  Vec r_m(em.size());
  for (Index k = 0; k < problem_.horizon(); ++k) {
    r_m.segment(k * m, m) = br.block(k).partialPivLu().solve(em.segment(k * m, m));
  }
  const Vec dl = loss_grad(problem_.loss_m, r_m);
  Vec lam_m(dl.size());
  for (Index k = 0; k < problem_.horizon(); ++k) {
    lam_m.segment(k * m, m) = br.block(k).transpose().partialPivLu().solve(dl.segment(k * m, m));
  }
  const Vec lam_p = -ops.dynamics.solve(ops.measurement.transpose_apply(lam_m), /*transposed=*/true);
  return jac_apply_states(problem_, x).transpose() * lam_p + jac_apply_states_h(problem_, x).transpose() * lam_m;
}

LsDualSolution SingularSmoother::ls_dual_solve(const VecRef& theta) const {
  if (problem_.loss_p.kind != LossKind::LeastSquares || problem_.loss_m.kind != LossKind::LeastSquares) {
    throw ConfigError("ls_dual_solve requires least-squares process and measurement losses");
  }
  const Assembly ops = assemble(problem_, theta);
  const Index nm = layout_.size(kLm);
  // G^{-T} H^T as a dense matrix, then S = (Bq^T G^{-T} H^T)^T (...) + R.
  const Mat m_dense = ops.dynamics.solve(ops.measurement.transpose_apply(Mat::Identity(nm, nm)), true);
  const Mat qm = problem_.q_factor.transpose_apply(m_dense);
  Mat s = qm.transpose() * qm;
  const Index m = problem_.meas_dim();
  for (Index k = 0; k < problem_.horizon(); ++k) s.block(k * m, k * m, m, m) += problem_.r_factor.covariance(k);

  Eigen::LDLT<Mat> ldlt(s);
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() >= kSingularRcond)) {
    throw DualSingular("dual system H G^{-1} Q G^{-T} H^T + R is singular");
  }
  const Vec predicted = ops.measurement.apply(ops.dynamics.solve(ops.zeta));
  LsDualSolution out;
  // Maximizer of -1/2 l^T S l - l^T (z - H G^{-1} zeta).
  out.lam_m = ldlt.solve(predicted - problem_.z);
  out.lam_p = -ops.dynamics.solve(ops.measurement.transpose_apply(out.lam_m), true);
  const Vec qlp = problem_.q_factor.transpose_apply(out.lam_p);
  const Vec rlm = problem_.r_factor.transpose_apply(out.lam_m);
  out.v = -0.5 * qlp.squaredNorm() - 0.5 * rlm.squaredNorm() - out.lam_p.dot(ops.zeta) - out.lam_m.dot(problem_.z);
  return out;
}

SaddleSolution solve_saddle(const SsmProblem& problem, const VecRef& theta, const SaddleState& init) {
  return SingularSmoother(problem).solve_saddle(theta, init);
}

ValueReport value_report_singular(const SsmProblem& problem, const VecRef& theta,
                                  const std::optional<Vec>& warm_start) {
  return SingularSmoother(problem).value_report(theta, warm_start);
}

Vec primal_grad_invertible_r(const SsmProblem& problem, const VecRef& theta, const VecRef& x) {
  return SingularSmoother(problem).primal_grad_invertible_r(theta, x);
}

LsDualSolution ls_dual_solve(const SsmProblem& problem, const VecRef& theta) {
  return SingularSmoother(problem).ls_dual_solve(theta);
}

}  // namespace ssmfit
