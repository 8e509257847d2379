#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ssmfit/value_report.hpp"

namespace ssmfit {

enum class OuterMethod { Newton, Lbfgs, LmNewton };

std::string to_string(OuterMethod method);
/// Accepts "newton", "lbfgs" / "l-bfgs", "lm" / "lm-newton". Throws ConfigError.
OuterMethod parse_outer_method(const std::string& text);

struct ArmijoOptions {
  double c1 = 1e-4;
  int max_halvings = 30;
};

struct OuterOptions {
  OuterMethod method = OuterMethod::Newton;
  Vec theta0;
  /// Stop when |grad|_inf <= grad_tol. Defaults to 1e-6 * (1 + |v(theta0)|).
  std::optional<double> grad_tol;
  int max_outer = 100;
  int memory = 10;           // L-BFGS pairs
  double lm_damping0 = 1e-3;  // initial LM damping
  ArmijoOptions line_search;
  double wolfe_c2 = 0.9;

  /// Throws ConfigError on non-positive tolerances or memory.
  void validate() const;
};

struct OuterIterate {
  Vec theta;
  double v = 0;
  double grad_norm = 0;  // inf-norm
  int inner_iters = 0;   // inner iterations spent reaching this iterate
  double step_len = 0;   // |theta_k - theta_{k-1}|_2
  double damping = 0;    // Hessian shift (Newton) or LM damping
};

enum class OuterStatus { Converged, MaxIterations, Stalled };

std::string to_string(OuterStatus status);

struct OuterTrace {
  std::vector<OuterIterate> iterates;  // iterates[0] is theta0
  int outer_iters = 0;
  int inner_iters = 0;  // summed over every oracle call
  int oracle_calls = 0;
  double wall_time = 0;  // seconds
  double grad_tol = 0;
  OuterStatus status = OuterStatus::MaxIterations;
};

struct OuterResult {
  Vec theta;
  ValueReport report;  // at theta
  OuterTrace trace;
};

/// v(theta) with derivatives. The flag asks for the Hessian.
using Oracle = std::function<ValueReport(const VecRef&, bool)>;

/// Minimizes v starting at opts.theta0. Accepted steps never increase v.
/// Throws LineSearchFailure when no decrease is found and OracleFailure when
/// the oracle fails at theta0 or at an accepted point.
OuterResult minimize(const Oracle& oracle, const OuterOptions& opts);

/// Symmetrized h, shifted by mu I with mu = |lambda_min| + 1e-8 when h is
/// indefinite or `trusted` is false. Returns the shift through `shift`.
Mat repair_hessian(const MatRef& h, bool trusted, double* shift = nullptr);

}  // namespace ssmfit
