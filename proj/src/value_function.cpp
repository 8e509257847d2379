#include "ssmfit/value_function.hpp"

#include <algorithm>
#include <cmath>

#include "ssmfit/errors.hpp"

namespace ssmfit {

std::string to_string(SmootherPath path) {
  switch (path) {
    case SmootherPath::Auto:
      return "auto";
    case SmootherPath::Nonsingular:
      return "nonsingular";
    case SmootherPath::Singular:
      return "singular";
  }
  return "unknown";
}

ValueFunction::ValueFunction(SsmProblem problem, SmootherPath path, InnerOptions opts) : path_(path) {
  if (path_ == SmootherPath::Auto) {
    const bool invertible = problem.q_factor.invertible() && problem.r_factor.invertible();
    path_ = invertible ? SmootherPath::Nonsingular : SmootherPath::Singular;
  }
  if (path_ == SmootherPath::Nonsingular) {
    nonsingular_.emplace(std::move(problem), opts);
  } else {
    InnerOptions sopts = opts;
    if (sopts.max_iters < SingularSmoother::default_options().max_iters) {
      sopts.max_iters = SingularSmoother::default_options().max_iters;
    }
    singular_.emplace(std::move(problem), sopts);
  }
}

const SsmProblem& ValueFunction::problem() const {
  return nonsingular_ ? nonsingular_->problem() : singular_->problem();
}

ValueReport ValueFunction::evaluate(const VecRef& theta, const std::optional<Vec>& warm, bool want_hessian) const {
  if (nonsingular_) return nonsingular_->value_report(theta, warm, want_hessian);
  return singular_->value_report(theta, warm, want_hessian);
}

ValueReport ValueFunction::operator()(const VecRef& theta, bool want_hessian) {
  if (theta.size() != problem().n_params()) throw DimensionMismatch("ValueFunction: theta has the wrong length");
  ValueReport rep;
  if (use_warm_ && warm_) {
    try {
      rep = evaluate(theta, warm_, want_hessian);
    } catch (const MaxIterations&) {
      rep = evaluate(theta, std::nullopt, want_hessian);
    }
  } else {
    rep = evaluate(theta, std::nullopt, want_hessian);
  }
  warm_ = rep.solution;
  return rep;
}

Mat ValueFunction::last_states() const {
  if (!warm_) throw Error("ValueFunction::last_states: no solution yet");
  const Index n = problem().state_dim();
  const Index big_n = problem().horizon();
  Mat out(big_n, n);
  for (Index k = 0; k < big_n; ++k) out.row(k) = warm_->segment(k * n, n).transpose();
  return out;
}

namespace {

double rel_err(const MatRef& a, const MatRef& d) {
  double e = 0;
  for (Index i = 0; i < a.size(); ++i) {
    e = std::max(e, std::abs(a.data()[i] - d.data()[i]) / std::max(1.0, std::abs(d.data()[i])));
  }
  return e;
}

}  // namespace

DerivativeCheck check_derivatives(ValueFunction& v, const VecRef& theta, double step) {
  const Index p = theta.size();
  DerivativeCheck out;
  const ValueReport rep = v(theta, true);
  out.grad = rep.grad;
  out.hess = rep.hess;
  out.grad_fd.resize(p);
  out.hess_fd.resize(p, p);
  for (Index j = 0; j < p; ++j) {
    Vec tp = theta, tm = theta;
    tp(j) += step;
    tm(j) -= step;
    const ValueReport rp = v(tp, false);
    const ValueReport rm = v(tm, false);
    out.grad_fd(j) = (rp.v - rm.v) / (2 * step);
    out.hess_fd.col(j) = (rp.grad - rm.grad) / (2 * step);
  }
  out.hess_fd = 0.5 * (out.hess_fd + out.hess_fd.transpose()).eval();
  out.grad_rel_err = rel_err(out.grad, out.grad_fd);
  out.hess_rel_err = rel_err(out.hess, out.hess_fd);
  return out;
}

}  // namespace ssmfit
