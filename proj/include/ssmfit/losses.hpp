#pragma once

#include <string>

#include "ssmfit/linalg.hpp"

namespace ssmfit {

/// Smallest admissible curvature once a loss Hessian has been boosted.
inline constexpr double kPsdFloor = 1e-8;

enum class LossKind { LeastSquares, Hybrid, StudentT };

/// Separable smooth loss applied to a whitened residual vector.
///
///   LeastSquares  0.5 * sum r_i^2
///   Hybrid        sum sqrt(r_i^2 + nu^2) - nu
///   StudentT      sum ln(1 + r_i^2 / nu)
///
/// `boost` is added to every diagonal entry of the Hessian.
struct LossSpec {
  LossKind kind = LossKind::LeastSquares;
  double nu = 1.0;
  double boost = 0.0;

  static LossSpec least_squares() { return {}; }
  static LossSpec hybrid(double nu) { return {LossKind::Hybrid, nu, 0.0}; }
  static LossSpec student_t(double nu) { return {LossKind::StudentT, nu, 0.0}; }

  /// Throws ConfigError if nu <= 0 (Hybrid, StudentT) or boost < 0.
  void validate() const;
  /// Convex losses keep the inner problems strictly convex.
  bool convex() const { return kind != LossKind::StudentT; }

  /// Parses "ls", "hybrid:0.7", "t:10" (also "student:10", "h:0.7").
  static LossSpec parse(const std::string& text);
  /// Short label such as "ls", "H", "T" as used in result tables.
  std::string label() const;
  /// Inverse of parse().
  std::string to_string() const;

  friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

double loss_value(const LossSpec& spec, const VecRef& r);
Vec loss_grad(const LossSpec& spec, const VecRef& r);
/// Diagonal of the Hessian plus spec.boost.
Vec loss_hess_diag(const LossSpec& spec, const VecRef& r);
/// Diagonal of the Hessian plus an explicit boost (spec.boost ignored).
Vec loss_hess_diag(const LossSpec& spec, const VecRef& r, double boost);
/// Smallest boost >= 0 that lifts every raw curvature entry to kPsdFloor.
double min_psd_boost(const LossSpec& spec, const VecRef& r);
/// Curvature actually used by the Newton solvers: the configured LossSpec boost, raised to
/// min_psd_boost() when that is not enough. `boosted` reports the raise.
Vec safeguarded_hess_diag(const LossSpec& spec, const VecRef& r, bool* boosted = nullptr);

}  // namespace ssmfit
