// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "ssmfit/errors.hpp"
#include "ssmfit/experiment.hpp"
#include "ssmfit/saddle.hpp"
#include "ssmfit/smoother.hpp"
#include "ssmfit/value_function.hpp"
#include "test_support.hpp"

namespace ssmfit {
namespace {

namespace fs = std::filesystem;
using testing::random_problem;
using testing::RandomProblemOptions;
using testing::rel_error;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

InnerOptions tight() {
  InnerOptions o;
  o.tol_scale = 1e-12;
  return o;
}

// ---------------------------------------------------------------------------
// 1. Analytic derivatives against central differences.

Outcome derivative_exactness() {
  double worst_g = 0, worst_h = 0;
  int count = 0;
  for (SmootherPath path : {SmootherPath::Nonsingular, SmootherPath::Singular}) {
    for (int i = 0; i < 10; ++i) {
      RandomProblemOptions o;
      o.horizon = 20;
      o.n = 2 + i % 3;
      o.m = 1 + i % 2;
      o.p = 1 + i % 3;
      const bool singular = path == SmootherPath::Singular;
      o.q_rank = singular ? o.n - 1 : o.n;
      o.r_rank = o.m;
      o.loss_p = i % 2 ? LossSpec::hybrid(0.7) : LossSpec::least_squares();
      o.loss_m = i % 4 < 2 ? LossSpec::least_squares() : LossSpec::hybrid(0.7);
      Vec theta;
      const SsmProblem p = random_problem(1000 + static_cast<std::uint64_t>(i) + (singular ? 500 : 0), o, &theta);
      ValueFunction vf(p, path, tight());
      vf.set_warm_start(false);
      const DerivativeCheck c = check_derivatives(vf, theta);
      worst_g = std::max(worst_g, c.grad_rel_err);
      worst_h = std::max(worst_h, c.hess_rel_err);
      ++count;
    }
  }
  return {worst_g <= 1e-6 && worst_h <= 1e-4, std::to_string(count) + " instances, max grad err " +
                                                  fmt("%.2e", worst_g) + " (tol 1e-6), max Hessian err " +
                                                  fmt("%.2e", worst_h) + " (tol 1e-4)"};
}

// ---------------------------------------------------------------------------
// 2. Both smoothers agree when Q and R are invertible.

Outcome special_case_consistency() {
  double dv = 0, dg = 0, dh = 0;
  for (int i = 0; i < 10; ++i) {
    RandomProblemOptions o;
    o.horizon = 20;
    o.n = 2 + i % 3;
    o.m = 1 + i % 2;
    o.p = 1 + i % 3;
    o.q_rank = o.n;
    o.r_rank = o.m;
    o.loss_p = i % 2 ? LossSpec::hybrid(0.7) : LossSpec::least_squares();
    o.loss_m = i % 3 ? LossSpec::hybrid(0.5) : LossSpec::least_squares();
    Vec theta;
    const SsmProblem p = random_problem(2000 + static_cast<std::uint64_t>(i), o, &theta);
    const ValueReport a = NonsingularSmoother(p, tight()).value_report(theta);
    InnerOptions so = SingularSmoother::default_options();
    so.tol_scale = 1e-12;
    const ValueReport b = SingularSmoother(p, so).value_report(theta);
    dv = std::max(dv, std::abs(a.v - b.v) / std::max(1.0, std::abs(a.v)));
    dg = std::max(dg, rel_error(b.grad, a.grad));
    dh = std::max(dh, rel_error(b.hess, a.hess));
  }
  return {dv <= 1e-8 && dg <= 1e-7 && dh <= 1e-5, "max diff v " + fmt("%.2e", dv) + " (tol 1e-8), grad " +
                                                      fmt("%.2e", dg) + " (tol 1e-7), Hessian " + fmt("%.2e", dh) +
                                                      " (tol 1e-5)"};
}

// ---------------------------------------------------------------------------
// 3. Saddle multipliers against the least-squares dual closed form.

Outcome ls_dual_oracle() {
  double worst = 0;
  for (int i = 0; i < 10; ++i) {
    RandomProblemOptions o;
    o.horizon = 20;
    o.n = 2 + i % 3;
    o.m = 1 + i % 2;
    o.p = 1 + i % 3;
    o.q_rank = std::max<Index>(1, o.n - 1 - i % 2);
    o.r_rank = o.m;
    Vec theta;
    const SsmProblem p = random_problem(3000 + static_cast<std::uint64_t>(i), o, &theta);
    InnerOptions so = SingularSmoother::default_options();
    so.tol_scale = 1e-12;
    SingularSmoother s(p, so);
    const SaddleSolution sol = s.solve_saddle(theta, s.cold_start(theta));
    const LsDualSolution dual = s.ls_dual_solve(theta);
    worst = std::max({worst, rel_error(sol.y.lam_m, dual.lam_m), rel_error(sol.y.lam_p, dual.lam_p)});
  }
  return {worst <= 1e-8, "10 instances, max multiplier diff " + fmt("%.2e", worst) + " (tol 1e-8)"};
}

// ---------------------------------------------------------------------------
// 4. Null-condition dichotomy on the AR(1) construction.

Outcome null_condition_dichotomy() {
  Ar1Spec spec;
  spec.horizon = 100;
  const SimulatedData d = simulate_ar1(spec, 0.8, 1.0, Scenario::nominal(), 1);
  Mat padded = Mat::Zero(spec.horizon, 2);
  padded.col(0) = d.z;
  const Vec theta = Vec::Constant(1, 0.8);
  bool padded_raises = false;
  try {
    SingularSmoother s(build_ar1_padded(spec, padded));
    s.solve_saddle(theta, s.cold_start(theta));
  } catch (const SchurSingular&) {
    padded_raises = true;
  }
  bool unpadded_ok = false;
  try {
    const ValueReport r = SingularSmoother(build_ar1(spec, d.z)).value_report(theta);
    unpadded_ok = r.converged && std::isfinite(r.v);
  } catch (const Error&) {
  }
  return {padded_raises && unpadded_ok, std::string("padded raises SchurSingular: ") +
                                            (padded_raises ? "yes" : "no") +
                                            ", unpadded solves: " + (unpadded_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 5. AR(1) hand-derived derivative forms.

Outcome ar1_hand_formulas() {
  Ar1Spec spec;
  spec.horizon = 100;
  spec.x0 << 0.3, 0.0;
  const SimulatedData d = simulate_ar1(spec, 0.8, 1.0, Scenario::nominal(), 2);
  const SsmProblem p = build_ar1(spec, d.z);
  const Index big_n = spec.horizon;
  auto dx = [&](const Vec& x) {
    Vec out = Vec::Zero(2 * big_n);
    for (Index k = 0; k < big_n; ++k) out(2 * k) = k == 0 ? p.x0(0) : x(2 * (k - 1));
    return out;
  };
  auto dt_lambda = [&](const Vec& lam) {
    Vec out = Vec::Zero(2 * big_n);
    for (Index k = 1; k < big_n; ++k) out(2 * (k - 1)) = lam(2 * k);
    return out;
  };
  std::mt19937_64 rng(5);
  const Vec x = testing::random_vector(rng, 2 * big_n);
  const Vec lam = testing::random_vector(rng, 2 * big_n);
  const double jac_err = std::max((jac_apply_states(p, x).col(0) + dx(x)).lpNorm<Eigen::Infinity>(),
                                  (jac_apply_duals(p, lam).col(0) + dt_lambda(lam)).lpNorm<Eigen::Infinity>());

  double grad_err = 0;
  SingularSmoother s(p, tight());
  for (double phi : {0.3, 0.8, 1.1}) {
    const ValueReport rep = s.value_report(Vec::Constant(1, phi), std::nullopt, false);
    const SaddleState y = SaddleState::from_stacked(s.layout(), rep.solution);
    grad_err = std::max(grad_err, std::abs(rep.grad(0) + y.lam_p.dot(dx(y.x))));
  }
  return {jac_err <= 1e-15 && grad_err <= 1e-10, "Jacobian diff " + fmt("%.1e", jac_err) +
                                                     " (tol 1e-15), gradient vs -<lam_p, Dx> " +
                                                     fmt("%.2e", grad_err) + " (tol 1e-10)"};
}

// ---------------------------------------------------------------------------
// 6. Robust losses beat least squares on the unemployment grid.

fs::path config_dir() { return fs::path(SSMFIT_SOURCE_DIR) / "configs"; }

std::vector<RunRecord> g_grid_records;

Outcome unemployment_grid_qualitative() {
  RunConfig c = load_run_config(config_dir() / "unemployment_grid.json");
  c.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  g_grid_records = run_experiment(c);
  auto med = [&](const std::string& scenario, const std::string& lp, const std::string& lm) {
    std::vector<double> e;
    for (const auto& r : g_grid_records) {
      if (r.scenario == scenario && r.loss_p == lp && r.loss_m == lm && r.method == "newton" && r.status != "failed") {
        e.push_back(r.theta_err2);
      }
    }
    return median(e);
  };
  const std::string ls = "ls", h = "hybrid:0.7", t = "t:10";
  const double out_ls = med("outliers", ls, ls), out_h = med("outliers", ls, h);
  const double j_ls = med("jumps", ls, ls), j_t = med("jumps", t, ls), j_h = med("jumps", h, ls);
  const double nom = med("nominal", ls, ls);
  const bool a = out_ls >= 3 * out_h;
  const bool b = j_ls >= 2 * j_t && j_ls >= 2 * j_h;
  const bool cc = nom >= 0.05 && nom <= 0.5;
  return {a && b && cc, "(a) outliers ls/ls " + fmt("%.3f", out_ls) + " vs ls/H " + fmt("%.3f", out_h) +
                            (a ? " ok" : " FAIL") + "; (b) jumps ls/ls " + fmt("%.3f", j_ls) + " vs T/ls " +
                            fmt("%.3f", j_t) + ", H/ls " + fmt("%.3f", j_h) + (b ? " ok" : " FAIL") +
                            "; (c) nominal ls/ls " + fmt("%.3f", nom) + (cc ? " ok" : " FAIL")};
}

// ---------------------------------------------------------------------------
// 7. All outer methods reach the same estimate on convex problems.

Outcome optimizer_parity() {
  double worst = 0;
  int failures = 0, disagree = 0;
  for (const LossCombo& losses :
       {LossCombo{LossSpec::least_squares(), LossSpec::least_squares()},
        LossCombo{LossSpec::least_squares(), LossSpec::hybrid(0.7)}}) {
    for (const Scenario& scenario : {Scenario::nominal(), Scenario::outliers()}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        RunConfig c;
        c.theta_true = UnemploymentSpec{}.theta_true;
        const PreparedRun run = prepare_run(c, scenario, losses, seed);
        std::vector<Vec> est;
        for (OuterMethod m : {OuterMethod::Newton, OuterMethod::Lbfgs, OuterMethod::LmNewton}) {
          OuterOptions o;
          o.method = m;
          o.theta0 = Vec::Zero(3);
          o.grad_tol = 1e-8;
          o.max_outer = 1000;
          ValueFunction vf(run.problem);
          try {
            est.push_back(minimize([&](const VecRef& th, bool h) { return vf(th, h); }, o).theta);
          } catch (const Error&) {
            ++failures;
          }
        }
        double gap = 0;
        for (std::size_t i = 1; i < est.size(); ++i) gap = std::max(gap, (est[i] - est[0]).lpNorm<Eigen::Infinity>());
        if (gap > 1e-3) ++disagree;
        worst = std::max(worst, gap);
      }
    }
  }
  return {failures == 0 && worst <= 1e-3, "20 problems x 3 methods, max |theta_i - theta_newton| " +
                                              fmt("%.2e", worst) + " (tol 1e-3), problems disagreeing " +
                                              std::to_string(disagree) + ", failures " + std::to_string(failures)};
}

// ---------------------------------------------------------------------------
// 8. Monotone decrease and determinism on every shipped config.

bool same_records(const std::vector<RunRecord>& a, const std::vector<RunRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const RunRecord &x = a[i], &y = b[i];
    const bool same_theta = x.theta_hat.size() == y.theta_hat.size() &&
                            std::equal(x.theta_hat.data(), x.theta_hat.data() + x.theta_hat.size(),
                                       y.theta_hat.data(), [](double u, double v) {
                                         return u == v || (std::isnan(u) && std::isnan(v));
                                       });
    auto eq = [](double u, double v) { return u == v || (std::isnan(u) && std::isnan(v)); };
    if (x.scenario != y.scenario || x.loss_p != y.loss_p || x.loss_m != y.loss_m || x.method != y.method ||
        x.seed != y.seed || x.status != y.status || !same_theta || !eq(x.v_final, y.v_final) ||
        x.outer_iters != y.outer_iters || x.inner_iters != y.inner_iters || !eq(x.state_rmse, y.state_rmse)) {
      return false;
    }
  }
  return true;
}

// Replays every grid cell and checks that accepted iterates never increase v.
int count_monotone_violations(const RunConfig& c, int* runs) {
  int bad = 0;
  if (c.n_params() == 0) return 0;
  for (const auto& s : c.scenarios) {
    for (const auto& l : c.losses) {
      for (const auto& m : c.methods) {
        for (std::uint64_t seed : c.seeds) {
          const PreparedRun run = prepare_run(c, s, l, seed);
          ValueFunction vf(run.problem, c.path);
          OuterOptions o = m;
          o.theta0 = initial_theta(c, s, l, m);
          ++*runs;
          try {
            const OuterResult r = minimize([&](const VecRef& th, bool h) { return vf(th, h); }, o);
            const auto& it = r.trace.iterates;
            for (std::size_t k = 1; k < it.size(); ++k) bad += it[k].v > it[k - 1].v ? 1 : 0;
          } catch (const Error&) {
            // A failed run has no accepted iterates to check.
          }
        }
      }
    }
  }
  return bad;
}

Outcome shipped_config_invariants() {
  int configs = 0, runs = 0, violations = 0, nondeterministic = 0;
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(config_dir())) {
    if (entry.path().extension() == ".json") names.push_back(entry.path().string());
  }
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    RunConfig c = load_run_config(name);
    ++configs;
    c.threads = 1;
    const auto serial = run_experiment(c);
    std::vector<RunRecord> parallel;
    if (fs::path(name).filename() == "unemployment_grid.json" && !g_grid_records.empty()) {
      parallel = g_grid_records;  // already produced with several threads
    } else {
      RunConfig cp = c;
      cp.threads = static_cast<int>(std::max(2u, std::thread::hardware_concurrency()));
      parallel = run_experiment(cp);
    }
    if (!same_records(serial, parallel)) ++nondeterministic;
    violations += count_monotone_violations(c, &runs);
  }
  return {configs > 0 && violations == 0 && nondeterministic == 0,
          std::to_string(configs) + " configs, " + std::to_string(runs) + " replayed runs, monotonicity violations " +
              std::to_string(violations) + ", configs with nondeterministic output " +
              std::to_string(nondeterministic)};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0: no runtime bound
  std::function<Outcome()> check;
};

}  // namespace
}  // namespace ssmfit

int main() {
  using namespace ssmfit;
  const std::vector<Criterion> criteria{
      {1, "derivative exactness", 30, derivative_exactness},
      {2, "nonsingular/singular consistency", 10, special_case_consistency},
      {3, "least-squares dual oracle", 5, ls_dual_oracle},
      {4, "null-condition dichotomy", 2, null_condition_dichotomy},
      {5, "AR(1) hand-derived derivatives", 0, ar1_hand_formulas},
      {6, "robust-loss advantage on the unemployment grid", 600, unemployment_grid_qualitative},
      {7, "optimizer parity", 300, optimizer_parity},
      {8, "monotone decrease and determinism on shipped configs", 0, shipped_config_invariants},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.limit_s == 0 || secs <= c.limit_s;
    const bool pass = o.pass && in_time;
    failed += pass ? 0 : 1;
    const std::string limit = c.limit_s > 0 ? " (limit " + fmt("%.0f", c.limit_s) + " s)" : "";
    std::printf("criterion %d: %s  %s: %s; %.1f s%s%s\n", c.id, pass ? "PASS" : "FAIL", c.name, o.detail.c_str(),
                secs, limit.c_str(), in_time ? "" : " TOO SLOW");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
