#include <gtest/gtest.h>

#include <cmath>

#include "ssmfit/errors.hpp"
#include "ssmfit/losses.hpp"
#include "test_support.hpp"

namespace ssmfit {
namespace {

const LossSpec kAll[] = {LossSpec::least_squares(), LossSpec::hybrid(0.7), LossSpec::hybrid(0.01),
                         LossSpec::student_t(4), LossSpec::student_t(0.5)};

TEST(Loss, ClosedFormValues) {
  const Vec r = (Vec(2) << 3.0, -4.0).finished();
  EXPECT_DOUBLE_EQ(loss_value(LossSpec::least_squares(), r), 12.5);
  EXPECT_NEAR(loss_value(LossSpec::hybrid(1.0), r), std::sqrt(10.0) - 1 + std::sqrt(17.0) - 1, 1e-14);
  EXPECT_NEAR(loss_value(LossSpec::student_t(2.0), r), std::log(5.5) + std::log(9.0), 1e-14);
  for (const LossSpec& s : kAll) EXPECT_EQ(loss_value(s, Vec::Zero(3)), 0.0) << s.to_string();
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  const Vec r = testing::random_vector(rng, 6, 2.0);
  for (const LossSpec& s : kAll) {
    const Vec fd = testing::fd_gradient([&](const Vec& x) { return loss_value(s, x); }, r, 1e-6);
    EXPECT_LE(testing::rel_error(loss_grad(s, r), fd), 1e-7) << s.to_string();
  }
}

TEST(Loss, HessianDiagonalMatchesDifferencesOfGradient) {
  std::mt19937_64 rng(2);
  const Vec r = testing::random_vector(rng, 6, 2.0);
  for (const LossSpec& s : kAll) {
    const Mat fd = testing::fd_jacobian([&](const Vec& x) { return loss_grad(s, x); }, r, 1e-6);
    EXPECT_LE(testing::rel_error(loss_hess_diag(s, r).asDiagonal().toDenseMatrix(), fd), 1e-6) << s.to_string();
  }
}

TEST(Loss, BoostShiftsCurvatureOnly) {
  const Vec r = (Vec(2) << 0.3, -2.0).finished();
  LossSpec s = LossSpec::hybrid(0.5);
  const Vec base = loss_hess_diag(s, r);
  s.boost = 0.25;
  EXPECT_TRUE(loss_hess_diag(s, r).isApprox(Vec(base.array() + 0.25)));
  EXPECT_TRUE(loss_hess_diag(s, r, 1.0).isApprox(Vec(base.array() + 1.0)));
  EXPECT_EQ(loss_value(s, r), loss_value(LossSpec::hybrid(0.5), r));
}

TEST(Loss, StudentTCurvatureTurnsNegativeBeyondSqrtNu) {
  const LossSpec s = LossSpec::student_t(4.0);
  const Vec r = (Vec(3) << 1.0, 2.0, 3.0).finished();
  const Vec h = loss_hess_diag(s, r);
  EXPECT_GT(h(0), 0);
  EXPECT_NEAR(h(1), 0, 1e-15);
  EXPECT_LT(h(2), 0);
}

TEST(Loss, MinPsdBoostLiftsToFloor) {
  const LossSpec s = LossSpec::student_t(1.0);
  const Vec r = (Vec(3) << 0.1, 2.0, 5.0).finished();
  const double b = min_psd_boost(s, r);
  EXPECT_GT(b, 0);
  EXPECT_NEAR(loss_hess_diag(s, r, b).minCoeff(), kPsdFloor, 1e-15);
  EXPECT_EQ(min_psd_boost(LossSpec::hybrid(1.0), r), 0.0);
  bool boosted = false;
  EXPECT_GE(safeguarded_hess_diag(s, r, &boosted).minCoeff(), kPsdFloor * (1 - 1e-6));
  EXPECT_TRUE(boosted);
  safeguarded_hess_diag(LossSpec::least_squares(), r, &boosted);
  EXPECT_FALSE(boosted);
}

TEST(Loss, ConvexLossesHavePositiveCurvature) {
  std::mt19937_64 rng(3);
  const Vec r = testing::random_vector(rng, 50, 10.0);
  EXPECT_GT(loss_hess_diag(LossSpec::hybrid(0.1), r).minCoeff(), 0);
  EXPECT_TRUE(LossSpec::hybrid(1).convex());
  EXPECT_FALSE(LossSpec::student_t(1).convex());
}

TEST(LossSpec, ParseRoundTrip) {
  for (const LossSpec& s : kAll) EXPECT_EQ(LossSpec::parse(s.to_string()), s) << s.to_string();
  EXPECT_EQ(LossSpec::parse("h:0.7"), LossSpec::hybrid(0.7));
  EXPECT_EQ(LossSpec::parse("student:10"), LossSpec::student_t(10));
  EXPECT_EQ(LossSpec::hybrid(2).label(), "H");
  EXPECT_EQ(LossSpec::student_t(2).label(), "T");
  EXPECT_EQ(LossSpec::least_squares().label(), "ls");
}

TEST(LossSpec, ParseRejectsMalformedInput) {
  for (const char* bad : {"", "huber:1", "hybrid", "hybrid:abc", "hybrid:1x", "ls:1", "t:-1", "hybrid:0"}) {
    EXPECT_THROW(LossSpec::parse(bad), ConfigError) << bad;
  }
  LossSpec s = LossSpec::hybrid(1);
  s.boost = -1;
  EXPECT_THROW(s.validate(), ConfigError);
}

}  // namespace
}  // namespace ssmfit
