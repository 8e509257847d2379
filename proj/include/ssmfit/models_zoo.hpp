#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssmfit/model.hpp"
#include "ssmfit/outer_opt.hpp"

namespace ssmfit {

/// Data-generation recipe for synthetic experiments.
struct Scenario {
  enum class Kind { Nominal, Outliers, Jumps };

  Kind kind = Kind::Nominal;
  double outlier_frac = 0.1;  // fraction of measurement entries contaminated
  double outlier_sd = 1.0;    // sd of the extra Gaussian noise
  /// (0-based step, magnitude) pairs.
  std::vector<std::pair<Index, double>> jumps;
  /// Add jumps to measurements instead of process innovations.
  bool jumps_in_measurements = false;

  static Scenario nominal() { return {}; }
  static Scenario outliers(double frac = 0.1, double sd = 1.0);
  /// Defaults to +0.4 at step 25 and -0.2 at step 65.
  static Scenario with_jumps(std::vector<std::pair<Index, double>> jumps = {{25, 0.4}, {65, -0.2}});
  /// "nominal", "outliers" or "jumps" with default parameters. Throws ConfigError.
  static Scenario parse(const std::string& name);

  std::string name() const;
  /// Throws ConfigError when frac is outside (0, 1) or a jump index is >= horizon.
  void validate(Index horizon) const;
};

/// Simulated series, one time step per row.
struct SimulatedData {
  Mat z;       // N x m
  Mat x_true;  // N x n
};

/// Stacks an N x m series row by row.
Vec stack_rows(const MatRef& series);
/// Inverse of stack_rows.
Mat unstack_rows(const VecRef& stacked, Index cols);

/// Draws x_k = G_k(theta) x_{k-1} + Bq_k e_k and z_k = H_k(theta) x_k + Br_k d_k
/// with standard normal e, d from a mt19937_64 seeded with `seed`, then applies
/// the scenario. Process jumps are added to state component `jump_component`.
/// problem.z is ignored. Deterministic given the seed.
SimulatedData simulate(const SsmProblem& problem, const VecRef& theta, const Scenario& scenario, std::uint64_t seed,
                       Index jump_component = 0);

/// AR(1) with unknown constant, x_k = phi x_{k-1} + c + e_k, observed as
/// z_k = h x_k + d_k. The state is augmented to [x_k; c_k] with c_k held
/// constant by a zero-variance process row after the first step.
struct Ar1Spec {
  Index horizon = 100;
  double h = 1.0;    // observation coefficient
  double q0 = 1.0;   // prior variance of the constant slot
  double q = 0.01;   // process variance
  double r = 0.01;   // measurement variance
  LossSpec loss_p;
  LossSpec loss_m;
  Vec x0 = Vec::Zero(2);  // prior [x_0; c_0]

  /// Throws ConfigError.
  void validate() const;
};

/// p = 1 problem in theta = [phi]; z is N x 1.
SsmProblem build_ar1(const Ar1Spec& spec, const MatRef& z);
/// Same model with the observation padded to [[h, 0], [0, 0]] and a zero
/// measurement variance in the second row; z is N x 2. This form violates the
/// saddle null condition.
SsmProblem build_ar1_padded(const Ar1Spec& spec, const MatRef& z);
/// x_0 = spec.x0(0) and true constant `c`.
SimulatedData simulate_ar1(const Ar1Spec& spec, double phi, double c, const Scenario& scenario, std::uint64_t seed);

struct Ar1Fit {
  double phi = 0;
  double c = 0;
  OuterResult result;
};

/// opts.theta0 defaults to [0] when empty.
Ar1Fit ar1_fit(const MatRef& z, const Ar1Spec& spec, OuterOptions opts);

/// Structural unemployment model with state [u_{k-1}, uc_{k-1}, u_k, uc_k],
/// parameters theta = (l1, l2, gamma) and observations
/// (u_k + uc_k, gamma (uc_{k-1} + uc_k) / 2).
struct UnemploymentSpec {
  Index horizon = 100;
  Vec theta_true = (Vec(3) << 0.68, 1.41, -0.68).finished();
  Vec x0 = (Vec(4) << 5.0, 1.0, 5.0, 1.0).finished();
  Vec q_innov = Vec::Constant(2, 0.0025);  // variances of the u and uc innovations
  Vec r_meas = Vec::Constant(2, 0.01);     // measurement variances
  LossSpec loss_p;
  LossSpec loss_m;

  /// Throws ConfigError.
  void validate() const;
};

/// State component receiving process jumps (u_k).
inline constexpr Index kUnemploymentJumpComponent = 2;

/// p = 3 problem; z is N x 2.
SsmProblem build_unemployment(const UnemploymentSpec& spec, const MatRef& z);
SimulatedData simulate_unemployment(const UnemploymentSpec& spec, const VecRef& theta, const Scenario& scenario,
                                    std::uint64_t seed);

}  // namespace ssmfit
