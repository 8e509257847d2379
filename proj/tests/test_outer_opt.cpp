#include <gtest/gtest.h>

#include <cmath>

#include "ssmfit/errors.hpp"
#include "ssmfit/outer_opt.hpp"

namespace ssmfit {
namespace {

Oracle quadratic(const Mat& a, const Vec& b) {
  return [a, b](const VecRef& t, bool want_hess) {
    ValueReport r;
    r.v = 0.5 * t.dot(a * t) - b.dot(t);
    r.grad = a * t - b;
    if (want_hess) r.hess = a;
    r.converged = true;
    r.inner_iters = 1;
    return r;
  };
}

ValueReport rosenbrock(const VecRef& t, bool want_hess) {
  const double x = t(0), y = t(1);
  ValueReport r;
  r.v = 100 * (y - x * x) * (y - x * x) + (1 - x) * (1 - x);
  r.grad = Vec(2);
  r.grad << -400 * x * (y - x * x) - 2 * (1 - x), 200 * (y - x * x);
  if (want_hess) {
    r.hess = Mat(2, 2);
    r.hess << 1200 * x * x - 400 * y + 2, -400 * x, -400 * x, 200;
    r.hess_psd = r.hess.selfadjointView<Eigen::Lower>().eigenvalues().minCoeff() > 0;
  }
  r.converged = true;
  return r;
}

OuterOptions opts(OuterMethod m, Vec theta0, int max_outer = 500) {
  OuterOptions o;
  o.method = m;
  o.theta0 = std::move(theta0);
  o.max_outer = max_outer;
  return o;
}

TEST(OuterMethod, ParsesNamesAndAliases) {
  EXPECT_EQ(parse_outer_method("newton"), OuterMethod::Newton);
  EXPECT_EQ(parse_outer_method("l-bfgs"), OuterMethod::Lbfgs);
  EXPECT_EQ(parse_outer_method("lm"), OuterMethod::LmNewton);
  EXPECT_EQ(parse_outer_method(to_string(OuterMethod::LmNewton)), OuterMethod::LmNewton);
  EXPECT_THROW(parse_outer_method("bfgs"), ConfigError);
}

TEST(Newton, SolvesQuadraticInOneIteration) {
  const Mat a = (Mat(2, 2) << 3, 1, 1, 2).finished();
  const Vec b = (Vec(2) << 1, -1).finished();
  const OuterResult r = minimize(quadratic(a, b), opts(OuterMethod::Newton, Vec::Zero(2)));
  EXPECT_EQ(r.trace.status, OuterStatus::Converged);
  EXPECT_EQ(r.trace.outer_iters, 1);
  EXPECT_LE((r.theta - a.ldlt().solve(b)).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(AllMethods, ConvergeOnRosenbrockFromStandardStart) {
  for (OuterMethod m : {OuterMethod::Newton, OuterMethod::Lbfgs, OuterMethod::LmNewton}) {
    OuterOptions o = opts(m, (Vec(2) << -1.2, 1.0).finished(), 2000);
    o.grad_tol = 1e-8;
    const OuterResult r = minimize(rosenbrock, o);
    // Near v = 0 a gradient of 1e-8 can sit below the decrease noise floor.
    EXPECT_NE(r.trace.status, OuterStatus::MaxIterations) << to_string(m);
    EXPECT_LE((r.theta - Vec::Ones(2)).lpNorm<Eigen::Infinity>(), 1e-5) << to_string(m);
  }
}

TEST(AllMethods, AcceptedIteratesNeverIncreaseTheObjective) {
  for (OuterMethod m : {OuterMethod::Newton, OuterMethod::Lbfgs, OuterMethod::LmNewton}) {
    const OuterResult r = minimize(rosenbrock, opts(m, (Vec(2) << -1.2, 1.0).finished(), 2000));
    const auto& it = r.trace.iterates;
    ASSERT_GE(it.size(), 2u);
    EXPECT_TRUE(it.front().theta.isApprox((Vec(2) << -1.2, 1.0).finished()));
    for (std::size_t k = 1; k < it.size(); ++k) EXPECT_LE(it[k].v, it[k - 1].v) << to_string(m) << " k=" << k;
    EXPECT_EQ(static_cast<int>(it.size()) - 1, r.trace.outer_iters);
  }
}

TEST(LmNewton, WithoutDampingFollowsNewtonOnConvexProblem) {
  const Mat a = (Mat(3, 3) << 4, 1, 0, 1, 3, 1, 0, 1, 2).finished();
  // Strictly convex but non-quadratic: v = 0.5 t'At + sum exp(t_i).
  Oracle f = [a](const VecRef& t, bool want_hess) {
    ValueReport r;
    r.v = 0.5 * t.dot(a * t) + t.array().exp().sum();
    r.grad = a * t + Vec(t.array().exp());
    if (want_hess) r.hess = a + Mat(t.array().exp().matrix().asDiagonal());
    return r;
  };
  OuterOptions n = opts(OuterMethod::Newton, Vec::Ones(3));
  OuterOptions lm = opts(OuterMethod::LmNewton, Vec::Ones(3));
  lm.lm_damping0 = 0;
  const OuterResult rn = minimize(f, n);
  const OuterResult rl = minimize(f, lm);
  ASSERT_EQ(rn.trace.iterates.size(), rl.trace.iterates.size());
  for (std::size_t k = 0; k < rn.trace.iterates.size(); ++k) {
    EXPECT_LE((rn.trace.iterates[k].theta - rl.trace.iterates[k].theta).norm(), 1e-10);
  }
}

TEST(LmNewton, ConvergesQuadraticallyNearTheMinimum) {
  Oracle f = [](const VecRef& t, bool want_hess) {
    ValueReport r;
    r.v = t.array().exp().sum() - t.sum() + 0.25 * t.squaredNorm() * t.squaredNorm();
    r.grad = Vec(t.array().exp() - 1.0) + t.squaredNorm() * t;
    if (want_hess) {
      r.hess = Mat(t.array().exp().matrix().asDiagonal()) + t.squaredNorm() * Mat::Identity(t.size(), t.size()) +
               2 * t * t.transpose();
    }
    return r;
  };
  OuterOptions o = opts(OuterMethod::LmNewton, Vec::Constant(2, 0.5));
  o.grad_tol = 1e-14;
  const OuterResult r = minimize(f, o);
  const auto& it = r.trace.iterates;
  // Gradient norms collapse: once below 1e-2, each step at least squares the error (up to a constant).
  int fast = 0;
  for (std::size_t k = 1; k + 1 < it.size(); ++k) {
    const double g0 = it[k].grad_norm, g1 = it[k + 1].grad_norm;
    if (g0 < 1e-2 && g0 > 1e-12 && g1 <= 10 * g0 * g0) ++fast;
  }
  EXPECT_GE(fast, 1);
  EXPECT_EQ(r.trace.status, OuterStatus::Stalled);
  EXPECT_LE(r.theta.lpNorm<Eigen::Infinity>(), 1e-5);
}

TEST(Lbfgs, NeverRequestsHessians) {
  int hess_calls = 0;
  Oracle f = [&](const VecRef& t, bool want_hess) {
    hess_calls += want_hess ? 1 : 0;
    return rosenbrock(t, false);
  };
  const OuterResult r = minimize(f, opts(OuterMethod::Lbfgs, (Vec(2) << -1.2, 1.0).finished(), 2000));
  EXPECT_EQ(hess_calls, 0);
  EXPECT_EQ(r.trace.status, OuterStatus::Converged);
  EXPECT_GT(r.trace.oracle_calls, r.trace.outer_iters);
}

TEST(Minimize, DefaultToleranceScalesWithInitialValue) {
  const OuterResult r = minimize(quadratic(Mat::Identity(1, 1), Vec::Zero(1)), opts(OuterMethod::Newton, Vec::Constant(1, 10.0)));
  EXPECT_NEAR(r.trace.grad_tol, 1e-6 * (1 + 50.0), 1e-15);
}

TEST(Minimize, StartingAtTheMinimumTakesNoSteps) {
  const OuterResult r = minimize(quadratic(Mat::Identity(2, 2), Vec::Zero(2)), opts(OuterMethod::Lbfgs, Vec::Zero(2)));
  EXPECT_EQ(r.trace.status, OuterStatus::Converged);
  EXPECT_EQ(r.trace.outer_iters, 0);
}

TEST(Minimize, MaxIterationsIsReported) {
  const OuterResult r = minimize(rosenbrock, opts(OuterMethod::Lbfgs, (Vec(2) << -1.2, 1.0).finished(), 3));
  EXPECT_EQ(r.trace.status, OuterStatus::MaxIterations);
  EXPECT_EQ(r.trace.outer_iters, 3);
}

TEST(Minimize, WrongGradientMakesLineSearchFail) {
  // The reported gradient points uphill, so no step along -grad decreases v.
  Oracle f = [](const VecRef& t, bool want_hess) {
    ValueReport r;
    r.v = t.squaredNorm();
    r.grad = -2 * t;
    if (want_hess) r.hess = 2 * Mat::Identity(t.size(), t.size());
    return r;
  };
  EXPECT_THROW(minimize(f, opts(OuterMethod::Newton, Vec::Ones(2))), LineSearchFailure);
}

TEST(Minimize, OracleErrorsDuringTrialsAreRejectedSteps) {
  // v is undefined beyond t = 2; the full Newton step from t = 1 overshoots into that region.
  Oracle f = [](const VecRef& t, bool want_hess) {
    if (t(0) > 2) throw MaxIterations("outside domain");
    ValueReport r;
    r.v = -std::log(2.5 - t(0)) + 0.5 * t(0) * t(0);
    r.grad = Vec::Constant(1, 1 / (2.5 - t(0)) + t(0));
    if (want_hess) r.hess = Mat::Constant(1, 1, 1 / ((2.5 - t(0)) * (2.5 - t(0))) + 1);
    return r;
  };
  const OuterResult r = minimize(f, opts(OuterMethod::Newton, Vec::Constant(1, -3.0)));
  EXPECT_EQ(r.trace.status, OuterStatus::Converged);
}

TEST(Minimize, OracleFailureAtStartIsRaised) {
  Oracle f = [](const VecRef&, bool) -> ValueReport { throw MaxIterations("inner"); };
  EXPECT_THROW(minimize(f, opts(OuterMethod::Newton, Vec::Zero(1))), OracleFailure);
}

TEST(Minimize, RejectsInvalidOptions) {
  OuterOptions o = opts(OuterMethod::Lbfgs, Vec::Zero(1));
  o.memory = 0;
  EXPECT_THROW(o.validate(), ConfigError);
  o = opts(OuterMethod::Newton, Vec::Zero(1));
  o.grad_tol = -1;
  EXPECT_THROW(minimize(quadratic(Mat::Identity(1, 1), Vec::Zero(1)), o), ConfigError);
}

TEST(RepairHessian, ShiftsIndefiniteMatricesOnly) {
  double shift = -1;
  const Mat pd = (Mat(2, 2) << 2, 0, 0, 1).finished();
  EXPECT_TRUE(repair_hessian(pd, true, &shift).isApprox(pd));
  EXPECT_EQ(shift, 0.0);
  const Mat ind = (Mat(2, 2) << 1, 0, 0, -3).finished();
  const Mat fixed = repair_hessian(ind, true, &shift);
  EXPECT_NEAR(shift, 3 + 1e-8, 1e-12);
  EXPECT_GT(fixed.selfadjointView<Eigen::Lower>().eigenvalues().minCoeff(), 0);
  repair_hessian(pd, false, &shift);
  EXPECT_GT(shift, 0.0);
}

}  // namespace
}  // namespace ssmfit
