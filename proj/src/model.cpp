#include "ssmfit/model.hpp"

#include <string>

#include "ssmfit/errors.hpp"

namespace ssmfit {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionMismatch(what);
}

std::size_t idx(Index k) { return static_cast<std::size_t>(k); }

}  // namespace

AffineFamily::AffineFamily(Mat base, std::vector<Mat> directions)
    : base_(std::move(base)), directions_(std::move(directions)) {
  for (const Mat& d : directions_) {
    require(d.rows() == base_.rows() && d.cols() == base_.cols(),
            "AffineFamily: direction shape differs from base");
  }
}

AffineFamily AffineFamily::constant(Mat base, Index n_params) {
  std::vector<Mat> dirs(idx(n_params), Mat::Zero(base.rows(), base.cols()));
  return AffineFamily(std::move(base), std::move(dirs));
}

Mat AffineFamily::at(const VecRef& theta) const {
  require(theta.size() == n_params(), "AffineFamily::at: theta has " + std::to_string(theta.size()) +
                                          " entries, expected " + std::to_string(n_params()));
  Mat m = base_;
  for (Index j = 0; j < n_params(); ++j) m += theta(j) * direction(j);
  return m;
}

void SsmProblem::validate() const {
  const Index n_steps = horizon();
  require(n_steps >= 1, "SsmProblem: horizon must be at least 1");
  require(static_cast<Index>(measurement.size()) == n_steps, "SsmProblem: need one measurement family per step");
  const Index n = state_dim();
  const Index m = meas_dim();
  const Index p = n_params();
  for (Index k = 0; k < n_steps; ++k) {
    const auto& g = dynamics[idx(k)];
    const auto& h = measurement[idx(k)];
    require(g.rows() == n && g.cols() == n, "SsmProblem: G_" + std::to_string(k + 1) + " must be " +
                                                std::to_string(n) + "x" + std::to_string(n));
    require(h.rows() == m && h.cols() == n, "SsmProblem: H_" + std::to_string(k + 1) + " has the wrong shape");
    require(g.n_params() == p && h.n_params() == p, "SsmProblem: families disagree on the parameter count");
  }
  require(q_factor.n_blocks() == n_steps && r_factor.n_blocks() == n_steps,
          "SsmProblem: need one covariance factor block per step");
  require(q_factor.row_layout() == BlockLayout::uniform(n_steps, n), "SsmProblem: Q factor rows must equal state dim");
  require(r_factor.row_layout() == BlockLayout::uniform(n_steps, m),
          "SsmProblem: R factor rows must equal measurement dim");
  require(z.size() == n_steps * m, "SsmProblem: z has " + std::to_string(z.size()) + " entries, expected " +
                                       std::to_string(n_steps * m));
  loss_p.validate();
  loss_m.validate();
}

Assembly assemble(const SsmProblem& problem, const VecRef& theta) {
  require(theta.size() == problem.n_params(), "assemble: theta has " + std::to_string(theta.size()) +
                                                  " entries, expected " + std::to_string(problem.n_params()));
  const Index n_steps = problem.horizon();
  const Index n = problem.state_dim();
  std::vector<Mat> transitions;
  transitions.reserve(idx(n_steps > 0 ? n_steps - 1 : 0));
  for (Index k = 1; k < n_steps; ++k) transitions.push_back(problem.dynamics[idx(k)].at(theta));
  std::vector<Mat> h;
  h.reserve(idx(n_steps));
  for (Index k = 0; k < n_steps; ++k) h.push_back(problem.measurement[idx(k)].at(theta));
  Vec zeta = Vec::Zero(n_steps * n);
  zeta.head(n) = problem.dynamics.front().at(theta) * problem.x0;
  return {BlockBidiag(n, std::move(transitions)), BlockDiag(std::move(h)), std::move(zeta)};
}

Mat jac_apply_states(const SsmProblem& problem, const VecRef& x) {
  const Index n_steps = problem.horizon();
  const Index n = problem.state_dim();
  const Index p = problem.n_params();
  require(x.size() == n_steps * n, "jac_apply_states: state stack size mismatch");
  Mat out(n_steps * n, p);
  for (Index j = 0; j < p; ++j) {
    for (Index k = 0; k < n_steps; ++k) {
      const auto& prev = (k == 0) ? Vec(problem.x0) : Vec(x.segment((k - 1) * n, n));
      out.col(j).segment(k * n, n).noalias() = -problem.dynamics[idx(k)].direction(j) * prev;
    }
  }
  return out;
}

Mat jac_apply_states_h(const SsmProblem& problem, const VecRef& x) {
  const Index n_steps = problem.horizon();
  const Index n = problem.state_dim();
  const Index m = problem.meas_dim();
  const Index p = problem.n_params();
  require(x.size() == n_steps * n, "jac_apply_states_h: state stack size mismatch");
  Mat out(n_steps * m, p);
  for (Index j = 0; j < p; ++j) {
    for (Index k = 0; k < n_steps; ++k) {
      out.col(j).segment(k * m, m).noalias() = problem.measurement[idx(k)].direction(j) * x.segment(k * n, n);
    }
  }
  return out;
}

Mat jac_apply_duals(const SsmProblem& problem, const VecRef& lam) {
  const Index n_steps = problem.horizon();
  const Index n = problem.state_dim();
  const Index p = problem.n_params();
  require(lam.size() == n_steps * n, "jac_apply_duals: multiplier stack size mismatch");
  // G(theta) has -G_k at block (k, k-1); the x_0 term lives in zeta, not in G.
  Mat out = Mat::Zero(n_steps * n, p);
  for (Index j = 0; j < p; ++j) {
    for (Index k = 1; k < n_steps; ++k) {
      out.col(j).segment((k - 1) * n, n).noalias() =
          -problem.dynamics[idx(k)].direction(j).transpose() * lam.segment(k * n, n);
    }
  }
  return out;
}

Mat jac_apply_duals_h(const SsmProblem& problem, const VecRef& lam) {
  const Index n_steps = problem.horizon();
  const Index n = problem.state_dim();
  const Index m = problem.meas_dim();
  const Index p = problem.n_params();
  require(lam.size() == n_steps * m, "jac_apply_duals_h: multiplier stack size mismatch");
  Mat out(n_steps * n, p);
  for (Index j = 0; j < p; ++j) {
    for (Index k = 0; k < n_steps; ++k) {
      out.col(j).segment(k * n, n).noalias() =
          problem.measurement[idx(k)].direction(j).transpose() * lam.segment(k * m, m);
    }
  }
  return out;
}

ResidualPair residuals_nonsingular(const SsmProblem& problem, const VecRef& theta, const VecRef& x) {
  if (!problem.q_factor.invertible() || !problem.r_factor.invertible()) {
    throw SingularCovariance("residuals_nonsingular: covariance factors must be square and invertible");
  }
  const Assembly a = assemble(problem, theta);
  require(x.size() == a.dynamics.dim(), "residuals_nonsingular: state stack size mismatch");
  const Vec ep = a.dynamics.apply(x) - a.zeta;
  const Vec em = a.measurement.apply(x) - problem.z;
  ResidualPair out{Vec(ep.size()), Vec(em.size())};
  const Index n = problem.state_dim();
  const Index m = problem.meas_dim();
  for (Index k = 0; k < problem.horizon(); ++k) {
    out.r_p.segment(k * n, n) = problem.q_factor.block(k).partialPivLu().solve(ep.segment(k * n, n));
    out.r_m.segment(k * m, m) = problem.r_factor.block(k).partialPivLu().solve(em.segment(k * m, m));
  }
  return out;
}

NullConditionResult check_null_condition(const SsmProblem& problem, const VecRef& theta) {
  const Assembly a = assemble(problem, theta);
  const Index n_steps = problem.horizon();
  const Index m = problem.meas_dim();

  // Basis of N(R) = N(B_r^T), one step at a time.
  std::vector<Vec> basis;
  for (Index k = 0; k < n_steps; ++k) {
    const Mat& b = problem.r_factor.block(k);
    Mat kernel;
    if (b.cols() == 0) {
      kernel = Mat::Identity(m, m);
    } else {
      Eigen::JacobiSVD<Mat> svd(b.transpose(), Eigen::ComputeFullV);
      const auto& s = svd.singularValues();
      const double tol = 1e-10 * std::max(1.0, s.size() > 0 ? s(0) : 0.0);
      Index rank = 0;
      for (Index i = 0; i < s.size(); ++i) rank += s(i) > tol ? 1 : 0;
      kernel = svd.matrixV().rightCols(m - rank);
    }
    for (Index c = 0; c < kernel.cols(); ++c) {
      Vec e = Vec::Zero(n_steps * m);
      e.segment(k * m, m) = kernel.col(c);
      basis.push_back(std::move(e));
    }
  }
  NullConditionResult result;
  if (basis.empty()) return result;

  Mat nr(n_steps * m, static_cast<Index>(basis.size()));
  for (std::size_t c = 0; c < basis.size(); ++c) nr.col(static_cast<Index>(c)) = basis[c];
  const Mat image =
      problem.q_factor.transpose_apply(a.dynamics.solve(a.measurement.transpose_apply(nr), /*transposed=*/true));

  Eigen::JacobiSVD<Mat> svd(image, Eigen::ComputeFullV);
  const auto& s = svd.singularValues();
  const Index k = nr.cols();
  const double smax = s.size() > 0 ? s(0) : 0.0;
  // Fewer rows than columns means a nontrivial kernel regardless of values.
  const double smin = (s.size() < k) ? 0.0 : s(k - 1);
  if (smin <= 1e-10 * std::max(smax, 1e-300)) {
    result.ok = false;
    result.witness = nr * svd.matrixV().col(k - 1);
  }
  return result;
}

Vec propagate_states(const SsmProblem& problem, const VecRef& theta) {
  const Index n = problem.state_dim();
  Vec x(problem.horizon() * n);
  Vec prev = problem.x0;
  for (Index k = 0; k < problem.horizon(); ++k) {
    x.segment(k * n, n) = problem.dynamics[idx(k)].at(theta) * prev;
    prev = x.segment(k * n, n);
  }
  return x;
}

}  // namespace ssmfit
