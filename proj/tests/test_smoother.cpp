#include <gtest/gtest.h>

#include "ssmfit/errors.hpp"
#include "ssmfit/smoother.hpp"
#include "test_support.hpp"

namespace ssmfit {
namespace {

using testing::fd_gradient;
using testing::fd_jacobian;
using testing::random_problem;
using testing::RandomProblemOptions;
using testing::rel_error;

RandomProblemOptions invertible(LossSpec lp = {}, LossSpec lm = {}) {
  RandomProblemOptions o;
  o.horizon = 8;
  o.n = 3;
  o.m = 2;
  o.p = 2;
  o.q_rank = 3;
  o.r_rank = 2;
  o.loss_p = lp;
  o.loss_m = lm;
  return o;
}

// Dense normal-equation oracle for least squares: x = (G'Q^-1G + H'R^-1H)^-1 (G'Q^-1 zeta + H'R^-1 z).
Vec dense_ls_states(const SsmProblem& p, const Vec& theta) {
  const Mat g = testing::dense_dynamics(p, theta);
  const Mat h = testing::dense_measurement(p, theta);
  const Mat bq = testing::dense_block_diag(p.q_factor);
  const Mat br = testing::dense_block_diag(p.r_factor);
  const Mat qi = (bq * bq.transpose()).inverse();
  const Mat ri = (br * br.transpose()).inverse();
  const Mat a = g.transpose() * qi * g + h.transpose() * ri * h;
  const Vec b = g.transpose() * qi * testing::dense_zeta(p, theta) + h.transpose() * ri * p.z;
  return a.ldlt().solve(b);
}

TEST(NonsingularSmoother, LeastSquaresMatchesDenseNormalEquations) {
  Vec theta;
  const SsmProblem p = random_problem(3, invertible(), &theta);
  NonsingularSmoother s(p);
  const StateSolution sol = s.solve_states(theta, propagate_states(p, theta));
  EXPECT_LE((sol.x - dense_ls_states(p, theta)).lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(NonsingularSmoother, LeastSquaresConvergesInOneNewtonStep) {
  Vec theta;
  const SsmProblem p = random_problem(4, invertible(), &theta);
  NonsingularSmoother s(p);
  std::mt19937_64 rng(1);
  const StateSolution sol = s.solve_states(theta, testing::random_vector(rng, p.horizon() * p.state_dim(), 5.0));
  EXPECT_LE(sol.iterations, 2);  // one step, plus a possible rounding clean-up
  EXPECT_LE(sol.stationarity, s.tolerance());
}

TEST(NonsingularSmoother, NoiselessDataRecoversTrueStates) {
  Vec theta;
  SsmProblem p = random_problem(5, invertible(), &theta);
  const Vec x = propagate_states(p, theta);
  p.z = assemble(p, theta).measurement.apply(x);
  NonsingularSmoother s(p);
  const StateSolution sol = s.solve_states(theta, Vec::Zero(x.size()));
  EXPECT_LE((sol.x - x).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(NonsingularSmoother, HybridSolutionIsALocalMinimumOfTheObjective) {
  Vec theta;
  const SsmProblem p = random_problem(6, invertible(LossSpec::hybrid(0.7), LossSpec::hybrid(0.7)), &theta);
  NonsingularSmoother s(p);
  const StateSolution sol = s.solve_states(theta, propagate_states(p, theta));
  EXPECT_LE(sol.stationarity, 1e-9);
  // Derivative-free check: compass search from the solution finds nothing better.
  const double f0 = s.objective(theta, sol.x);
  Vec x = sol.x;
  double best = f0;
  for (double step = 1e-2; step > 1e-6; step *= 0.5) {
    for (Index i = 0; i < x.size(); ++i) {
      for (double sgn : {-1.0, 1.0}) {
        Vec trial = x;
        trial(i) += sgn * step;
        const double f = s.objective(theta, trial);
        if (f < best) {
          best = f;
          x = trial;
        }
      }
    }
  }
  EXPECT_GE(best, f0 - 1e-7);
}

TEST(NonsingularSmoother, StationarityMatchesObjectiveGradient) {
  Vec theta;
  const SsmProblem p = random_problem(7, invertible(LossSpec::hybrid(0.5), LossSpec::student_t(4)), &theta);
  NonsingularSmoother s(p);
  std::mt19937_64 rng(2);
  const Vec x = propagate_states(p, theta) + testing::random_vector(rng, p.horizon() * p.state_dim(), 0.3);
  const Vec fd = fd_gradient([&](const Vec& y) { return s.objective(theta, y); }, x, 1e-6);
  EXPECT_LE(rel_error(s.stationarity(theta, x), fd), 1e-7);
}

TEST(NonsingularSmoother, StateHessianMatchesDifferencesOfStationarity) {
  Vec theta;
  const SsmProblem p = random_problem(8, invertible(LossSpec::hybrid(0.5), LossSpec::least_squares()), &theta);
  NonsingularSmoother s(p);
  const Vec x = propagate_states(p, theta);
  const ResidualPair r = s.residuals(theta, x);
  const Mat h = s.state_hessian(theta, loss_hess_diag(p.loss_p, r.r_p), loss_hess_diag(p.loss_m, r.r_m))
                    .apply(Mat::Identity(x.size(), x.size()));
  const Mat fd = fd_jacobian([&](const Vec& y) { return s.stationarity(theta, y); }, x, 1e-6);
  EXPECT_LE(rel_error(h, fd), 1e-6);
}

TEST(NonsingularSmoother, ValueReportDerivativesMatchFiniteDifferences) {
  for (LossSpec lm : {LossSpec::least_squares(), LossSpec::hybrid(0.7)}) {
    Vec theta;
    const SsmProblem p = random_problem(9, invertible(LossSpec::least_squares(), lm), &theta);
    InnerOptions tight;
    tight.tol_scale = 1e-12;
    NonsingularSmoother s(p, tight);
    const ValueReport rep = s.value_report(theta);
    const Vec g_fd = fd_gradient([&](const Vec& t) { return s.value_report(t, std::nullopt, false).v; }, theta, 1e-5);
    const Mat h_fd = fd_jacobian([&](const Vec& t) { return s.value_report(t, std::nullopt, false).grad; }, theta, 1e-5);
    EXPECT_LE(rel_error(rep.grad, g_fd), 1e-6) << lm.to_string();
    EXPECT_LE(rel_error(rep.hess, h_fd), 1e-4) << lm.to_string();
    EXPECT_TRUE(rep.hess_psd);
  }
}

TEST(NonsingularSmoother, TaylorRemainderIsThirdOrder) {
  Vec theta;
  const SsmProblem p = random_problem(10, invertible(), &theta);
  InnerOptions tight;
  tight.tol_scale = 1e-13;
  NonsingularSmoother s(p, tight);
  const ValueReport rep = s.value_report(theta);
  std::mt19937_64 rng(3);
  const Vec dir = testing::random_vector(rng, theta.size());
  auto remainder = [&](double t) {
    const Vec d = t * dir;
    const double model = rep.v + rep.grad.dot(d) + 0.5 * d.dot(rep.hess * d);
    return std::abs(s.value_report(theta + d, std::nullopt, false).v - model);
  };
  const double r1 = remainder(0.1);
  const double r2 = remainder(0.05);
  // Halving the step divides an O(t^3) remainder by about 8.
  EXPECT_GT(r1 / r2, 6.0);
  EXPECT_LT(r1 / r2, 10.0);
}

TEST(NonsingularSmoother, NoParametersGivesEmptyDerivatives) {
  RandomProblemOptions o = invertible();
  o.p = 0;
  const SsmProblem p = random_problem(11, o);
  NonsingularSmoother s(p);
  const ValueReport rep = s.value_report(Vec());
  EXPECT_EQ(rep.grad.size(), 0);
  EXPECT_EQ(rep.hess.size(), 0);
  EXPECT_NEAR(rep.v, s.objective(Vec(), rep.solution), 1e-12);
}

TEST(NonsingularSmoother, StudentTReportsBoostedHessianWhenNotConvex) {
  Vec theta;
  SsmProblem p = random_problem(12, invertible(LossSpec::least_squares(), LossSpec::student_t(0.05)), &theta);
  // Large measurement residuals put Student's t curvature below zero.
  p.z.array() += 3.0;
  NonsingularSmoother s(p);
  const ValueReport rep = s.value_report(theta);
  const ResidualPair r = s.residuals(theta, rep.solution);
  const double min_curv = loss_hess_diag(p.loss_m, r.r_m).minCoeff();
  ASSERT_LT(min_curv, 0.0);
  EXPECT_TRUE(rep.hess.allFinite());
  EXPECT_EQ(rep.hess.rows(), theta.size());
}

TEST(NonsingularSmoother, RejectsSingularCovariance) {
  RandomProblemOptions o = invertible();
  o.q_rank = 2;
  const SsmProblem p = random_problem(13, o);
  EXPECT_THROW(NonsingularSmoother{p}, SingularCovariance);
}

TEST(NonsingularSmoother, WarmStartNeverNeedsMoreIterations) {
  int worse = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Vec theta;
    const SsmProblem p = random_problem(100 + seed, invertible(LossSpec::hybrid(0.7), LossSpec::hybrid(0.7)), &theta);
    NonsingularSmoother s(p);
    std::mt19937_64 rng(seed);
    const Vec theta1 = theta + 0.1 * testing::random_vector(rng, theta.size()).normalized();
    const ValueReport r0 = s.value_report(theta, std::nullopt, false);
    const int cold = s.value_report(theta1, std::nullopt, false).inner_iters;
    const int warm = s.value_report(theta1, r0.solution, false).inner_iters;
    if (warm > cold) ++worse;
  }
  EXPECT_EQ(worse, 0);
}

TEST(NonsingularSmoother, FreeFunctionsMatchMembers) {
  Vec theta;
  const SsmProblem p = random_problem(14, invertible(), &theta);
  const ValueReport a = value_report(p, theta);
  const ValueReport b = NonsingularSmoother(p).value_report(theta);
  EXPECT_DOUBLE_EQ(a.v, b.v);
  const StateSolution sol = solve_states(p, theta, propagate_states(p, theta));
  EXPECT_LE((sol.x - b.solution).lpNorm<Eigen::Infinity>(), 1e-12);
}

}  // namespace
}  // namespace ssmfit
