#include "ssmfit/outer_opt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>

#include "ssmfit/errors.hpp"

namespace ssmfit {

std::string to_string(OuterMethod method) {
  switch (method) {
    case OuterMethod::Newton:
      return "newton";
    case OuterMethod::Lbfgs:
      return "lbfgs";
    case OuterMethod::LmNewton:
      return "lm-newton";
  }
  return "unknown";
}

OuterMethod parse_outer_method(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "newton") return OuterMethod::Newton;
  if (t == "lbfgs" || t == "l-bfgs") return OuterMethod::Lbfgs;
  if (t == "lm" || t == "lm-newton" || t == "lmnewton") return OuterMethod::LmNewton;
  throw ConfigError("unknown outer method '" + text + "' (expected newton, lbfgs or lm-newton)");
}

std::string to_string(OuterStatus status) {
  switch (status) {
    case OuterStatus::Converged:
      return "converged";
    case OuterStatus::MaxIterations:
      return "max_iterations";
    case OuterStatus::Stalled:
      return "stalled";
  }
  return "unknown";
}

void OuterOptions::validate() const {
  if (grad_tol && !(*grad_tol > 0)) throw ConfigError("grad_tol must be positive");
  if (max_outer < 0) throw ConfigError("max_outer must be non-negative");
  if (memory < 1) throw ConfigError("L-BFGS memory must be at least 1");
  if (!(lm_damping0 >= 0)) throw ConfigError("lm_damping0 must be non-negative");
  if (!(line_search.c1 > 0 && line_search.c1 < 1)) throw ConfigError("Armijo c1 must lie in (0, 1)");
  if (!(wolfe_c2 > line_search.c1 && wolfe_c2 < 1)) throw ConfigError("Wolfe c2 must lie in (c1, 1)");
  if (line_search.max_halvings < 0) throw ConfigError("max_halvings must be non-negative");
}

Mat repair_hessian(const MatRef& h, bool trusted, double* shift) {
  Mat sym = 0.5 * (h + h.transpose());
  double mu = 0;
  if (sym.size() > 0) {
    const Eigen::SelfAdjointEigenSolver<Mat> eig(sym, Eigen::EigenvaluesOnly);
    const double lmin = eig.eigenvalues().minCoeff();
    const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
    if (!trusted || lmin <= 1e-14 * scale) mu = std::abs(lmin) + 1e-8;
  }
  sym.diagonal().array() += mu;
  if (shift != nullptr) *shift = mu;
  return sym;
}

namespace {

using Clock = std::chrono::steady_clock;

double inf_norm(const Vec& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

// Decreases below this are indistinguishable from rounding in v.
double noise_floor(double v) { return 1e-12 * (1.0 + std::abs(v)); }

bool finite_report(const ValueReport& r) {
  return std::isfinite(r.v) && r.grad.allFinite() && (r.hess.size() == 0 || r.hess.allFinite());
}

// Solves (h + mu I) d = rhs for symmetric PSD h, adding shift until Cholesky succeeds.
Vec spd_solve(const Mat& h, double mu, const Vec& rhs) {
  double extra = 0;
  for (int attempt = 0; attempt < 40; ++attempt) {
    Mat a = h;
    a.diagonal().array() += mu + extra;
    const Eigen::LLT<Mat> llt(a);
    if (llt.info() == Eigen::Success) {
      Vec d = llt.solve(rhs);
      if (d.allFinite()) return d;
    }
    extra = extra == 0 ? 1e-8 * std::max(1.0, h.diagonal().cwiseAbs().maxCoeff()) : extra * 10;
  }
  throw LineSearchFailure("could not factor the model Hessian");
}

class Driver {
 public:
  Driver(const Oracle& oracle, const OuterOptions& opts) : oracle_(oracle), opts_(opts) {}

  OuterResult run() {
    const auto start = Clock::now();
    want_hess_ = opts_.method != OuterMethod::Lbfgs;
    theta_ = opts_.theta0;
    cur_ = must_eval(theta_);
    trace_.grad_tol = opts_.grad_tol.value_or(1e-6 * (1.0 + std::abs(cur_.v)));
    record(0.0, 0.0);

    switch (opts_.method) {
      case OuterMethod::Newton:
        newton();
        break;
      case OuterMethod::Lbfgs:
        lbfgs();
        break;
      case OuterMethod::LmNewton:
        lm_newton();
        break;
    }
    trace_.wall_time = std::chrono::duration<double>(Clock::now() - start).count();
    if (!cur_.has_hessian() && want_hess_) cur_ = must_eval(theta_);
    return {theta_, cur_, trace_};
  }

 private:
  std::optional<ValueReport> try_eval(const Vec& theta, bool want_hess) {
    try {
      ValueReport rep = oracle_(theta, want_hess);
      ++trace_.oracle_calls;
      trace_.inner_iters += rep.inner_iters;
      pending_inner_ += rep.inner_iters;
      if (!finite_report(rep)) return std::nullopt;
      return rep;
    } catch (const OracleFailure&) {
      return std::nullopt;
    } catch (const LineSearchFailure&) {
      throw;
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  ValueReport must_eval(const Vec& theta) {
    try {
      ValueReport rep = oracle_(theta, want_hess_);
      ++trace_.oracle_calls;
      trace_.inner_iters += rep.inner_iters;
      pending_inner_ += rep.inner_iters;
      if (!finite_report(rep)) throw OracleFailure("value function is not finite at the starting point");
      return rep;
    } catch (const OracleFailure&) {
      throw;
    } catch (const Error& e) {
      throw OracleFailure(std::string("value function evaluation failed: ") + e.what());
    }
  }

  bool converged() const { return inf_norm(cur_.grad) <= trace_.grad_tol; }

  void record(double step_len, double damping) {
    trace_.iterates.push_back({theta_, cur_.v, inf_norm(cur_.grad), pending_inner_, step_len, damping});
    pending_inner_ = 0;
  }

  void accept(const Vec& theta, ValueReport rep, double damping) {
    const double step = (theta - theta_).norm();
    theta_ = theta;
    cur_ = std::move(rep);
    ++trace_.outer_iters;
    record(step, damping);
  }

  // Returns false when the loop should stop; sets the status.
  bool check_stop(int it) {
    if (converged()) {
      trace_.status = OuterStatus::Converged;
      return false;
    }
    if (it >= opts_.max_outer) {
      trace_.status = OuterStatus::MaxIterations;
      return false;
    }
    return true;
  }

  // Armijo backtracking from t = t0 along d; accepts the first good trial.
  bool armijo_step(const Vec& d, double t0, double damping) {
    const double slope = cur_.grad.dot(d);
    double t = t0;
    for (int k = 0; k <= opts_.line_search.max_halvings; ++k, t *= 0.5) {
      const Vec trial = theta_ + t * d;
      auto rep = try_eval(trial, true);
      if (rep && rep->v <= cur_.v + opts_.line_search.c1 * t * slope) {
        accept(trial, std::move(*rep), damping);
        return true;
      }
    }
    return false;
  }

  void newton() {
    for (int it = 0; check_stop(it); ++it) {
      double shift = 0;
      const Mat h = repair_hessian(cur_.hess, cur_.hess_psd, &shift);
      const Vec d = spd_solve(h, 0.0, -cur_.grad);
      // Below the value noise floor, keep going only while the gradient still contracts.
      const auto& its = trace_.iterates;
      if (-cur_.grad.dot(d) <= noise_floor(cur_.v) && its.size() >= 2 &&
          its.back().grad_norm >= its[its.size() - 2].grad_norm) {
        trace_.status = OuterStatus::Stalled;
        return;
      }
      // A barely repaired indefinite Hessian can give an arbitrarily long step,
      // so the first trial is capped at 1 + |theta| and steepest descent backs it up.
      double t0 = 1.0;
      if (shift > 0) t0 = std::min(1.0, (1.0 + theta_.norm()) / std::max(d.norm(), 1e-300));
      if (armijo_step(d, t0, shift)) continue;
      const Vec sd = -cur_.grad;
      const double ts = std::min(1.0, 1.0 / std::max(inf_norm(cur_.grad), 1e-300));
      if (armijo_step(sd, ts, shift)) continue;
      stall_or_fail(-ts * cur_.grad.dot(sd), "Newton");
      return;
    }
  }

  void stall_or_fail(double predicted, const char* method) {
    if (predicted <= noise_floor(cur_.v)) {
      trace_.status = OuterStatus::Stalled;
      return;
    }
    throw LineSearchFailure(std::string(method) + " line search found no decrease after " +
                            std::to_string(opts_.line_search.max_halvings) + " halvings");
  }

  void lm_newton() {
    double mu = opts_.lm_damping0;
    for (int it = 0; check_stop(it); ++it) {
      double shift = 0;
      const Mat h = repair_hessian(cur_.hess, cur_.hess_psd, &shift);
      const double radius = 1.0 + theta_.norm();
      bool done = false;
      for (int k = 0; k <= 2 * opts_.line_search.max_halvings; ++k) {
        Vec d = spd_solve(h, mu, -cur_.grad);
        // Same step cap as Newton after a repair; raising mu costs no oracle calls.
        for (int r = 0; shift > 0 && d.norm() > radius && r < 200; ++r) {
          mu = std::max(2 * mu, 1e-3);
          d = spd_solve(h, mu, -cur_.grad);
        }
        const double predicted = -(cur_.grad.dot(d) + 0.5 * d.dot(h * d));
        if (!(predicted > noise_floor(cur_.v))) {
          trace_.status = OuterStatus::Stalled;
          return;
        }
        const Vec trial = theta_ + d;
        auto rep = try_eval(trial, true);
        const double actual = rep ? cur_.v - rep->v : -std::numeric_limits<double>::infinity();
        const double ratio = actual / predicted;
        const double used = mu;
        if (ratio > 0.75) {
          mu *= 0.5;
        } else if (ratio < 0.25) {
          mu = mu == 0 ? 1e-3 : 2 * mu;
        }
        if (ratio > 0) {
          accept(trial, std::move(*rep), used);
          done = true;
          break;
        }
      }
      if (!done) throw LineSearchFailure("LM-Newton rejected every trial step");
    }
  }

  struct Point {
    double a = 0;
    double phi = 0;
    double dphi = 0;
    std::optional<ValueReport> rep;
  };

  Point probe(const Vec& d, double a) {
    Point p{a, std::numeric_limits<double>::infinity(), std::numeric_limits<double>::quiet_NaN(), std::nullopt};
    p.rep = try_eval(theta_ + a * d, false);
    if (p.rep) {
      p.phi = p.rep->v;
      p.dphi = p.rep->grad.dot(d);
    }
    return p;
  }

  // Strong Wolfe search; returns a point satisfying at least the Armijo
  // condition, or nothing.
  std::optional<Point> wolfe_search(const Vec& d, double a0) {
    const double phi0 = cur_.v;
    const double dphi0 = cur_.grad.dot(d);
    const double c1 = opts_.line_search.c1;
    const double c2 = opts_.wolfe_c2;
    const int budget = opts_.line_search.max_halvings;
    auto armijo = [&](const Point& p) { return p.rep && p.phi <= phi0 + c1 * p.a * dphi0; };
    auto curvature = [&](const Point& p) { return std::abs(p.dphi) <= -c2 * dphi0; };

    Point prev{0.0, phi0, dphi0, std::nullopt};
    std::optional<Point> best;
    auto zoom = [&](Point lo, Point hi) -> std::optional<Point> {
      for (int j = 0; j < budget; ++j) {
        Point p = probe(d, 0.5 * (lo.a + hi.a));
        if (!armijo(p) || p.phi >= lo.phi) {
          hi = std::move(p);
        } else {
          if (curvature(p)) return p;
          if (p.dphi * (hi.a - lo.a) >= 0) hi = lo;
          lo = std::move(p);
        }
      }
      if (lo.rep) return lo;
      return std::nullopt;
    };

    double a = a0;
    for (int i = 0; i < budget; ++i) {
      Point p = probe(d, a);
      if (!armijo(p) || (i > 0 && p.phi >= prev.phi)) return zoom(prev, p);
      if (curvature(p)) return p;
      if (p.dphi >= 0) return zoom(p, prev);
      best = p;
      prev = std::move(p);
      a *= 2;
    }
    return best;
  }

  void lbfgs() {
    std::deque<Vec> s_hist;
    std::deque<Vec> y_hist;
    for (int it = 0; check_stop(it); ++it) {
      // Two-loop recursion.
      Vec q = cur_.grad;
      std::vector<double> alpha(s_hist.size());
      for (std::size_t i = s_hist.size(); i-- > 0;) {
        alpha[i] = s_hist[i].dot(q) / y_hist[i].dot(s_hist[i]);
        q -= alpha[i] * y_hist[i];
      }
      if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      for (std::size_t i = 0; i < s_hist.size(); ++i) {
        const double beta = y_hist[i].dot(q) / y_hist[i].dot(s_hist[i]);
        q += (alpha[i] - beta) * s_hist[i];
      }
      Vec d = -q;
      if (!(cur_.grad.dot(d) < 0)) {
        s_hist.clear();
        y_hist.clear();
        d = -cur_.grad;
      }
      const double a0 = s_hist.empty() ? std::min(1.0, 1.0 / std::max(inf_norm(cur_.grad), 1e-300)) : 1.0;
      auto p = wolfe_search(d, a0);
      if (!p) {
        stall_or_fail(-a0 * cur_.grad.dot(d), "L-BFGS");
        return;
      }
      const Vec trial = theta_ + p->a * d;
      const Vec s = trial - theta_;
      const Vec y = p->rep->grad - cur_.grad;
      accept(trial, std::move(*p->rep), 0.0);
      if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
        s_hist.push_back(s);
        y_hist.push_back(y);
        if (static_cast<int>(s_hist.size()) > opts_.memory) {
          s_hist.pop_front();
          y_hist.pop_front();
        }
      }
    }
  }

  const Oracle& oracle_;
  const OuterOptions& opts_;
  bool want_hess_ = true;
  Vec theta_;
  ValueReport cur_;
  OuterTrace trace_;
  int pending_inner_ = 0;
};

}  // namespace

OuterResult minimize(const Oracle& oracle, const OuterOptions& opts) {
  opts.validate();
  return Driver(oracle, opts).run();
}

}  // namespace ssmfit
