#include "ssmfit/models_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ssmfit/errors.hpp"
#include "ssmfit/value_function.hpp"

namespace ssmfit {

namespace {

std::size_t idx(Index k) { return static_cast<std::size_t>(k); }

void require_rows(const MatRef& z, Index rows, Index cols, const std::string& who) {
  if (z.rows() != rows || z.cols() != cols) {
    throw DimensionMismatch(who + ": series must be " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                            std::to_string(z.rows()) + "x" + std::to_string(z.cols()));
  }
}

}  // namespace

Scenario Scenario::outliers(double frac, double sd) {
  Scenario s;
  s.kind = Kind::Outliers;
  s.outlier_frac = frac;
  s.outlier_sd = sd;
  return s;
}

Scenario Scenario::with_jumps(std::vector<std::pair<Index, double>> jumps) {
  Scenario s;
  s.kind = Kind::Jumps;
  s.jumps = std::move(jumps);
  return s;
}

Scenario Scenario::parse(const std::string& name) {
  if (name == "nominal") return nominal();
  if (name == "outliers") return outliers();
  if (name == "jumps") return with_jumps();
  throw ConfigError("unknown scenario '" + name + "' (expected nominal, outliers or jumps)");
}

std::string Scenario::name() const {
  switch (kind) {
    case Kind::Nominal:
      return "nominal";
    case Kind::Outliers:
      return "outliers";
    case Kind::Jumps:
      return "jumps";
  }
  return "unknown";
}

void Scenario::validate(Index horizon) const {
  if (kind == Kind::Outliers) {
    if (!(outlier_frac > 0 && outlier_frac < 1)) throw ConfigError("outlier fraction must lie in (0, 1)");
    if (!(outlier_sd >= 0)) throw ConfigError("outlier sd must be non-negative");
  }
  if (kind == Kind::Jumps) {
    for (const auto& [k, mag] : jumps) {
      if (k < 0 || k >= horizon) {
        throw ConfigError("jump index " + std::to_string(k) + " outside [0, " + std::to_string(horizon) + ")");
      }
      if (!std::isfinite(mag)) throw ConfigError("jump magnitude must be finite");
    }
  }
}

Vec stack_rows(const MatRef& series) {
  Vec out(series.size());
  for (Index k = 0; k < series.rows(); ++k) out.segment(k * series.cols(), series.cols()) = series.row(k).transpose();
  return out;
}

Mat unstack_rows(const VecRef& stacked, Index cols) {
  if (cols <= 0 || stacked.size() % cols != 0) throw DimensionMismatch("unstack_rows: size is not a multiple of cols");
  Mat out(stacked.size() / cols, cols);
  for (Index k = 0; k < out.rows(); ++k) out.row(k) = stacked.segment(k * cols, cols).transpose();
  return out;
}

SimulatedData simulate(const SsmProblem& problem, const VecRef& theta, const Scenario& scenario, std::uint64_t seed,
                       Index jump_component) {
  const Index big_n = problem.horizon();
  const Index n = problem.state_dim();
  const Index m = problem.meas_dim();
  scenario.validate(big_n);
  if (jump_component < 0 || jump_component >= n) throw ConfigError("jump component outside the state");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Index size) {
    Vec v(size);
    for (Index i = 0; i < size; ++i) v(i) = normal(rng);
    return v;
  };

  std::vector<double> process_jump(idx(big_n), 0.0);
  std::vector<double> meas_jump(idx(big_n), 0.0);
  if (scenario.kind == Scenario::Kind::Jumps) {
    for (const auto& [k, mag] : scenario.jumps) {
      (scenario.jumps_in_measurements ? meas_jump : process_jump)[idx(k)] += mag;
    }
  }

  SimulatedData out{Mat(big_n, m), Mat(big_n, n)};
  Vec x = problem.x0;
  for (Index k = 0; k < big_n; ++k) {
    const Mat g = problem.dynamics[idx(k)].at(theta);
    const Mat h = problem.measurement[idx(k)].at(theta);
    const Mat& bq = problem.q_factor.block(k);
    const Mat& br = problem.r_factor.block(k);
    x = g * x + bq * draw(bq.cols());
    x(jump_component) += process_jump[idx(k)];
    Vec z = h * x + br * draw(br.cols());
    if (m > 0) z(0) += meas_jump[idx(k)];
    out.x_true.row(k) = x.transpose();
    out.z.row(k) = z.transpose();
  }

  if (scenario.kind == Scenario::Kind::Outliers) {
    const Index total = big_n * m;
    const Index count = static_cast<Index>(std::llround(scenario.outlier_frac * static_cast<double>(total)));
    std::vector<Index> order(idx(total));
    std::iota(order.begin(), order.end(), Index{0});
    // Partial Fisher-Yates: the first `count` entries are a uniform sample.
    for (Index i = 0; i < count; ++i) {
      std::uniform_int_distribution<Index> pick(i, total - 1);
      std::swap(order[idx(i)], order[idx(pick(rng))]);
    }
    for (Index i = 0; i < count; ++i) {
      const Index e = order[idx(i)];
      out.z(e / m, e % m) += scenario.outlier_sd * normal(rng);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// AR(1)

void Ar1Spec::validate() const {
  if (horizon < 1) throw ConfigError("AR(1): horizon must be positive");
  if (!(q0 > 0)) throw ConfigError("AR(1): q0 must be positive");
  if (!(q >= 0)) throw ConfigError("AR(1): q must be non-negative");
  if (!(r > 0)) throw ConfigError("AR(1): r must be positive");
  if (x0.size() != 2) throw ConfigError("AR(1): x0 must have two entries");
  loss_p.validate();
  loss_m.validate();
}

namespace {

SsmProblem ar1_problem(const Ar1Spec& spec, const MatRef& z, bool padded) {
  spec.validate();
  const Index big_n = spec.horizon;
  const Index m = padded ? 2 : 1;
  require_rows(z, big_n, m, padded ? "build_ar1_padded" : "build_ar1");

  SsmProblem p;
  const Mat g_base = (Mat(2, 2) << 0, 1, 0, 1).finished();
  const Mat g_dir = (Mat(2, 2) << 1, 0, 0, 0).finished();
  Mat h = Mat::Zero(m, 2);
  h(0, 0) = spec.h;
  std::vector<Vec> q_var, r_var;
  for (Index k = 0; k < big_n; ++k) {
    p.dynamics.emplace_back(g_base, std::vector<Mat>{g_dir});
    p.measurement.push_back(AffineFamily::constant(h, 1));
    q_var.push_back((Vec(2) << spec.q, k == 0 ? spec.q0 : 0.0).finished());
    Vec rv = Vec::Zero(m);
    rv(0) = spec.r;
    r_var.push_back(rv);
  }
  p.q_factor = CovFactor::from_variances(q_var);
  p.r_factor = CovFactor::from_variances(r_var);
  p.loss_p = spec.loss_p;
  p.loss_m = spec.loss_m;
  p.z = stack_rows(z);
  p.x0 = spec.x0;
  p.validate();
  return p;
}

}  // namespace

SsmProblem build_ar1(const Ar1Spec& spec, const MatRef& z) { return ar1_problem(spec, z, false); }

SsmProblem build_ar1_padded(const Ar1Spec& spec, const MatRef& z) { return ar1_problem(spec, z, true); }

SimulatedData simulate_ar1(const Ar1Spec& spec, double phi, double c, const Scenario& scenario, std::uint64_t seed) {
  Ar1Spec truth = spec;
  truth.x0 = (Vec(2) << spec.x0(0), c).finished();
  SsmProblem p = build_ar1(truth, Mat::Zero(spec.horizon, 1));
  std::vector<Vec> q_var(idx(spec.horizon), (Vec(2) << spec.q, 0.0).finished());
  p.q_factor = CovFactor::from_variances(q_var);  // the simulated constant never moves
  return simulate(p, (Vec(1) << phi).finished(), scenario, seed, 0);
}

Ar1Fit ar1_fit(const MatRef& z, const Ar1Spec& spec, OuterOptions opts) {
  if (opts.theta0.size() == 0) opts.theta0 = Vec::Zero(1);
  ValueFunction vf(build_ar1(spec, z));
  Ar1Fit fit;
  fit.result = minimize([&](const VecRef& th, bool want_h) { return vf(th, want_h); }, opts);
  // Re-solve at the optimum so the cached states belong to theta-hat.
  vf(fit.result.theta, false);
  fit.phi = fit.result.theta(0);
  fit.c = vf.last_states()(spec.horizon - 1, 1);
  return fit;
}

// ---------------------------------------------------------------------------
// Unemployment

void UnemploymentSpec::validate() const {
  if (horizon < 1) throw ConfigError("unemployment: horizon must be positive");
  if (theta_true.size() != 3) throw ConfigError("unemployment: theta_true must have three entries");
  if (x0.size() != 4) throw ConfigError("unemployment: x0 must have four entries");
  if (q_innov.size() != 2 || !(q_innov.array() > 0).all()) {
    throw ConfigError("unemployment: q_innov must hold two positive variances");
  }
  if (r_meas.size() != 2 || !(r_meas.array() > 0).all()) {
    throw ConfigError("unemployment: r_meas must hold two positive variances");
  }
  loss_p.validate();
  loss_m.validate();
}

SsmProblem build_unemployment(const UnemploymentSpec& spec, const MatRef& z) {
  spec.validate();
  const Index big_n = spec.horizon;
  require_rows(z, big_n, 2, "build_unemployment");

  Mat g0 = Mat::Zero(4, 4);
  g0(0, 2) = 1;
  g0(1, 3) = 1;
  g0(2, 2) = 1;
  g0(3, 1) = 0.5;
  Mat g_l1 = Mat::Zero(4, 4);
  g_l1(2, 0) = -1;
  g_l1(2, 2) = 1;
  Mat g_l2 = Mat::Zero(4, 4);
  g_l2(3, 1) = -1;
  g_l2(3, 3) = 1;
  const Mat zero44 = Mat::Zero(4, 4);

  Mat h0 = Mat::Zero(2, 4);
  h0(0, 2) = 1;
  h0(0, 3) = 1;
  Mat h_gamma = Mat::Zero(2, 4);
  h_gamma(1, 1) = 0.5;
  h_gamma(1, 3) = 0.5;
  const Mat zero24 = Mat::Zero(2, 4);

  SsmProblem p;
  std::vector<Vec> q_var, r_var;
  for (Index k = 0; k < big_n; ++k) {
    p.dynamics.emplace_back(g0, std::vector<Mat>{g_l1, g_l2, zero44});
    p.measurement.emplace_back(h0, std::vector<Mat>{zero24, zero24, h_gamma});
    q_var.push_back((Vec(4) << 0.0, 0.0, spec.q_innov(0), spec.q_innov(1)).finished());
    r_var.push_back(spec.r_meas);
  }
  p.q_factor = CovFactor::from_variances(q_var);
  p.r_factor = CovFactor::from_variances(r_var);
  p.loss_p = spec.loss_p;
  p.loss_m = spec.loss_m;
  p.z = stack_rows(z);
  p.x0 = spec.x0;
  p.validate();
  return p;
}

SimulatedData simulate_unemployment(const UnemploymentSpec& spec, const VecRef& theta, const Scenario& scenario,
                                    std::uint64_t seed) {
  const SsmProblem p = build_unemployment(spec, Mat::Zero(spec.horizon, 2));
  return simulate(p, theta, scenario, seed, kUnemploymentJumpComponent);
}

}  // namespace ssmfit
