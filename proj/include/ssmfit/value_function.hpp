#pragma once

#include <functional>
#include <optional>
#include <string>

#include "ssmfit/saddle.hpp"
#include "ssmfit/smoother.hpp"

namespace ssmfit {

enum class SmootherPath { Auto, Nonsingular, Singular };

std::string to_string(SmootherPath path);

/// v(theta) for one problem, dispatched to the nonsingular or singular
/// smoother. Keeps the last inner solution as a warm start for the next call;
/// a warm-started solve that fails is retried once from the cold start.
///
/// Not thread-safe: the warm-start cache belongs to this object.
class ValueFunction {
 public:
  /// Auto selects the nonsingular path when both covariance factors are
  /// invertible.
  explicit ValueFunction(SsmProblem problem, SmootherPath path = SmootherPath::Auto, InnerOptions opts = {});

  ValueReport operator()(const VecRef& theta, bool want_hessian = true);

  SmootherPath path() const { return path_; }
  const SsmProblem& problem() const;
  const std::optional<Vec>& warm_start() const { return warm_; }
  void reset_warm_start() { warm_.reset(); }
  void set_warm_start(bool enabled) { use_warm_ = enabled; }

  /// Smoothed state estimates x_1..x_N (N x n) from the last solution.
  Mat last_states() const;

 private:
  ValueReport evaluate(const VecRef& theta, const std::optional<Vec>& warm, bool want_hessian) const;

  SmootherPath path_;
  std::optional<NonsingularSmoother> nonsingular_;
  std::optional<SingularSmoother> singular_;
  std::optional<Vec> warm_;
  bool use_warm_ = true;
};

/// Analytic derivatives against central differences: the gradient against
/// differences of v, the Hessian against differences of the gradient. Errors
/// are max_i |a_i - d_i| / max(1, |d_i|).
struct DerivativeCheck {
  Vec grad;
  Vec grad_fd;
  Mat hess;
  Mat hess_fd;
  double grad_rel_err = 0;
  double hess_rel_err = 0;
};

DerivativeCheck check_derivatives(ValueFunction& v, const VecRef& theta, double step = 1e-5);

}  // namespace ssmfit
