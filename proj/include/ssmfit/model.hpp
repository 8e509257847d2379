#pragma once

#include <vector>

#include "ssmfit/linalg.hpp"
#include "ssmfit/losses.hpp"

namespace ssmfit {

/// M(theta) = base + sum_j theta_j * direction_j.
class AffineFamily {
 public:
  AffineFamily() = default;
  AffineFamily(Mat base, std::vector<Mat> directions);
  static AffineFamily constant(Mat base, Index n_params);

  Index rows() const { return base_.rows(); }
  Index cols() const { return base_.cols(); }
  Index n_params() const { return static_cast<Index>(directions_.size()); }
  const Mat& base() const { return base_; }
  const Mat& direction(Index j) const { return directions_[static_cast<std::size_t>(j)]; }
  const std::vector<Mat>& directions() const { return directions_; }

  Mat at(const VecRef& theta) const;

  friend bool operator==(const AffineFamily& a, const AffineFamily& b) {
    return same_matrix(a.base_, b.base_) && same_matrices(a.directions_, b.directions_);
  }

 private:
  Mat base_;
  std::vector<Mat> directions_;
};

/// Linear state-space model
///
///   x_k = G_k(theta) x_{k-1} + B^q_k e_k,   z_k = H_k(theta) x_k + B^r_k d_k
///
/// for k = 1..N with a known x_0, per-step affine families and covariance
/// factors. Stacked vectors are ordered by time step.
struct SsmProblem {
  std::vector<AffineFamily> dynamics;     // G_1..G_N
  std::vector<AffineFamily> measurement;  // H_1..H_N
  CovFactor q_factor;
  CovFactor r_factor;
  LossSpec loss_p;
  LossSpec loss_m;
  Vec z;   // stacked observations, N * m
  Vec x0;  // initial state estimate

  Index horizon() const { return static_cast<Index>(dynamics.size()); }
  Index state_dim() const { return x0.size(); }
  Index meas_dim() const { return measurement.empty() ? 0 : measurement.front().rows(); }
  Index n_params() const { return dynamics.empty() ? 0 : dynamics.front().n_params(); }

  /// Throws DimensionMismatch when shapes disagree anywhere.
  void validate() const;

  friend bool operator==(const SsmProblem& a, const SsmProblem& b) {
    return a.dynamics == b.dynamics && a.measurement == b.measurement && a.q_factor == b.q_factor &&
           a.r_factor == b.r_factor && a.loss_p == b.loss_p && a.loss_m == b.loss_m && same_matrix(a.z, b.z) &&
           same_matrix(a.x0, b.x0);
  }
};

/// Stacked operators at a fixed theta: G(theta) (unit block-bidiagonal),
/// H(theta) (block diagonal) and the prior term zeta with zeta_1 = G_1(theta) x_0.
struct Assembly {
  BlockBidiag dynamics;
  BlockDiag measurement;
  Vec zeta;
};

Assembly assemble(const SsmProblem& problem, const VecRef& theta);

/// Columns d/dtheta_j of (G(theta) x - zeta(theta)); block k of column j is
/// -G_k^j x_{k-1}, with x_0 taken from the problem at k = 1. The families are
/// affine, so the result does not depend on theta.
Mat jac_apply_states(const SsmProblem& problem, const VecRef& x);
/// Columns d/dtheta_j of H(theta) x; block k of column j is H_k^j x_k.
Mat jac_apply_states_h(const SsmProblem& problem, const VecRef& x);
/// Columns d/dtheta_j of G(theta)^T lam (state-stack sized).
Mat jac_apply_duals(const SsmProblem& problem, const VecRef& lam);
/// Columns d/dtheta_j of H(theta)^T lam (state-stack sized).
Mat jac_apply_duals_h(const SsmProblem& problem, const VecRef& lam);

struct ResidualPair {
  Vec r_p;
  Vec r_m;
};

/// Whitened residuals r_p = Q^{-1/2}(G x - zeta), r_m = R^{-1/2}(H x - z).
/// Throws SingularCovariance when a factor block is not square and invertible.
ResidualPair residuals_nonsingular(const SsmProblem& problem, const VecRef& theta, const VecRef& x);

struct NullConditionResult {
  bool ok = true;
  Vec witness;  // measurement-stack direction in N(R) and N(Q G^{-T} H^T)
};

/// Tests N(R) intersect N(Q G^{-T} H^T) = {0} by rank inspection of
/// Q^{1/2 T} G^{-T} H^T restricted to a basis of N(R).
NullConditionResult check_null_condition(const SsmProblem& problem, const VecRef& theta);

/// States propagated from x_0 through the noiseless dynamics.
Vec propagate_states(const SsmProblem& problem, const VecRef& theta);

}  // namespace ssmfit
