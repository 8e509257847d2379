#include "ssmfit/cli.hpp"

#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ssmfit/errors.hpp"
#include "ssmfit/experiment.hpp"
#include "ssmfit/io.hpp"

namespace ssmfit {

namespace fs = std::filesystem;

namespace {

constexpr int kUsageError = 2;
constexpr int kSolverError = 1;

Vec parse_vector(const std::string& text, const std::string& flag) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      vals.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": '" + text + "' is not a comma-separated list of numbers");
    }
  }
  return Eigen::Map<Vec>(vals.data(), static_cast<Index>(vals.size()));
}

std::string format_vec(const VecRef& v) {
  std::ostringstream os;
  os << '[';
  for (Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << format_double(v(i));
  os << ']';
  return os.str();
}

struct RunArgs {
  std::string config;
  std::string output_dir;
  int threads = 0;
};

struct FitArgs {
  std::string model;
  std::string data;
  std::string loss_p = "ls";
  std::string loss_m = "ls";
  std::string method = "newton";
  std::string theta0;
  std::string states_out;
};

struct SimulateArgs {
  std::string model;
  std::string scenario = "nominal";
  std::uint64_t seed = 0;
  std::string out = ".";
  Index horizon = 100;
  std::string theta;
  bool jumps_to_measurements = false;
};

struct GradcheckArgs {
  std::string config;
  double tol = 1e-5;
  double hess_tol = 1e-4;
  double step = 1e-5;
};

int do_run(const RunArgs& a, std::ostream& out) {
  RunConfig cfg = load_run_config(a.config);
  if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
  if (a.threads > 0) cfg.threads = a.threads;
  const auto records = run_and_write(cfg);
  const auto summary = summarize(records);
  out << std::left << std::setw(10) << "scenario" << std::setw(12) << "loss_p" << std::setw(12) << "loss_m"
      << std::setw(11) << "method" << std::right << std::setw(6) << "runs" << std::setw(8) << "failed" << std::setw(13)
      << "err_median" << std::setw(13) << "err_mean" << std::setw(9) << "outer" << std::setw(9) << "inner"
      << std::setw(10) << "time_s" << '\n';
  for (const auto& r : summary) {
    out << std::left << std::setw(10) << r.scenario << std::setw(12) << r.loss_p << std::setw(12) << r.loss_m
        << std::setw(11) << r.method << std::right << std::setw(6) << r.runs << std::setw(8) << r.failed
        << std::setprecision(4) << std::setw(13) << r.err_median << std::setw(13) << r.err_mean << std::setw(9)
        << r.outer_mean << std::setw(9) << r.inner_mean << std::setw(10) << r.time_mean << '\n';
  }
  out << "wrote " << (cfg.output_dir / "results.csv").string() << '\n';
  const bool any_failed =
      std::any_of(records.begin(), records.end(), [](const RunRecord& r) { return r.status == "failed"; });
  return any_failed ? kSolverError : 0;
}

int do_fit(const FitArgs& a, std::ostream& out) {
  const Table data = read_csv(a.data);
  const Index big_n = data.data.rows();
  if (big_n < 1) throw ConfigError(a.data + ": no data rows");
  const LossSpec lp = LossSpec::parse(a.loss_p);
  const LossSpec lm = LossSpec::parse(a.loss_m);
  OuterOptions opts;
  opts.method = parse_outer_method(a.method);
  if (!a.theta0.empty()) opts.theta0 = parse_vector(a.theta0, "--theta0");

  SsmProblem problem;
  if (a.model == "ar1") {
    Ar1Spec spec;
    spec.horizon = big_n;
    spec.loss_p = lp;
    spec.loss_m = lm;
    problem = build_ar1(spec, data.data);
  } else if (a.model == "unemployment") {
    UnemploymentSpec spec;
    spec.horizon = big_n;
    spec.loss_p = lp;
    spec.loss_m = lm;
    problem = build_unemployment(spec, data.data);
  } else {
    if (!fs::exists(a.model)) throw ConfigError("model must be ar1, unemployment or a problem file: " + a.model);
    problem = read_problem(a.model);
    problem.loss_p = lp;
    problem.loss_m = lm;
    if (data.data.rows() != problem.horizon() || data.data.cols() != problem.meas_dim()) {
      throw ConfigError(a.data + ": series shape does not match the problem file");
    }
    problem.z = stack_rows(data.data);
  }
  if (opts.theta0.size() == 0) opts.theta0 = Vec::Zero(problem.n_params());
  if (opts.theta0.size() != problem.n_params()) {
    throw ConfigError("--theta0: expected " + std::to_string(problem.n_params()) + " entries");
  }

  ValueFunction vf(problem);
  const OuterResult res = minimize([&](const VecRef& th, bool h) { return vf(th, h); }, opts);
  vf(res.theta, false);
  const Mat states = vf.last_states();
  if (a.model == "ar1") {
    out << "phi = " << format_double(res.theta(0)) << '\n';
    out << "c = " << format_double(states(big_n - 1, 1)) << '\n';
  } else {
    out << "theta = " << format_vec(res.theta) << '\n';
  }
  out << "v = " << format_double(res.report.v) << '\n';
  out << "status = " << to_string(res.trace.status) << ", outer iterations = " << res.trace.outer_iters
      << ", inner iterations = " << res.trace.inner_iters << '\n';
  if (!a.states_out.empty()) {
    write_csv(a.states_out, {numbered_header("x_hat", states.cols()), states});
    out << "wrote " << a.states_out << '\n';
  }
  return 0;
}

int do_simulate(const SimulateArgs& a, std::ostream& out) {
  Scenario sc = Scenario::parse(a.scenario);
  sc.jumps_in_measurements = a.jumps_to_measurements;
  SimulatedData data;
  Vec theta;
  nlohmann::json manifest{{"model", a.model}, {"scenario", a.scenario}, {"seed", a.seed}};
  if (a.model == "ar1") {
    Ar1Spec spec;
    spec.horizon = a.horizon;
    theta = a.theta.empty() ? (Vec(2) << 0.8, 1.0).finished() : parse_vector(a.theta, "--theta");
    if (theta.size() != 2) throw ConfigError("--theta: ar1 expects phi,c");
    data = simulate_ar1(spec, theta(0), theta(1), sc, a.seed);
    manifest["params"] = {{"q", spec.q}, {"r", spec.r}, {"h", spec.h}, {"x0", vec_to_json(spec.x0)}};
  } else if (a.model == "unemployment") {
    UnemploymentSpec spec;
    spec.horizon = a.horizon;
    theta = a.theta.empty() ? spec.theta_true : parse_vector(a.theta, "--theta");
    if (theta.size() != 3) throw ConfigError("--theta: unemployment expects l1,l2,gamma");
    data = simulate_unemployment(spec, theta, sc, a.seed);
    manifest["params"] = {{"q_innov", vec_to_json(spec.q_innov)},
                          {"r_meas", vec_to_json(spec.r_meas)},
                          {"x0", vec_to_json(spec.x0)}};
  } else {
    if (!fs::exists(a.model)) throw ConfigError("model must be ar1, unemployment or a problem file: " + a.model);
    const SsmProblem problem = read_problem(a.model);
    theta = a.theta.empty() ? Vec::Zero(problem.n_params()) : parse_vector(a.theta, "--theta");
    if (theta.size() != problem.n_params()) throw ConfigError("--theta: wrong number of parameters");
    data = simulate(problem, theta, sc, a.seed, 0);
  }
  manifest["theta"] = vec_to_json(theta);
  nlohmann::json sj{{"kind", sc.name()}};
  if (sc.kind == Scenario::Kind::Outliers) sj.update({{"frac", sc.outlier_frac}, {"sd", sc.outlier_sd}});
  if (sc.kind == Scenario::Kind::Jumps) {
    sj["jumps"] = nlohmann::json::array();
    for (const auto& [k, mag] : sc.jumps) sj["jumps"].push_back({k, mag});
    sj["target"] = sc.jumps_in_measurements ? "measurement" : "process";
  }
  manifest["scenario_params"] = sj;
  manifest["horizon"] = data.z.rows();

  const fs::path dir = a.out;
  write_csv(dir / "z.csv", {numbered_header("z", data.z.cols()), data.z});
  write_csv(dir / "x_true.csv", {numbered_header("x", data.x_true.cols()), data.x_true});
  write_json(dir / "manifest.json", manifest);
  out << "wrote " << (dir / "z.csv").string() << ", " << (dir / "x_true.csv").string() << ", "
      << (dir / "manifest.json").string() << '\n';
  return 0;
}

int do_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const RunConfig cfg = load_run_config(a.config);
  const PreparedRun run = prepare_run(cfg, cfg.scenarios.front(), cfg.losses.front(), cfg.seeds.front());
  InnerOptions inner;
  inner.tol_scale = 1e-11;
  ValueFunction vf(run.problem, cfg.path, inner);
  const Vec theta = cfg.theta_true;
  if (theta.size() == 0) {
    out << "model has no parameters; nothing to check\n";
    return 0;
  }
  const DerivativeCheck chk = check_derivatives(vf, theta, a.step);
  out << "smoother path: " << to_string(vf.path()) << '\n';
  out << "theta = " << format_vec(theta) << '\n';
  out << "grad (analytic)   = " << format_vec(chk.grad) << '\n';
  out << "grad (difference) = " << format_vec(chk.grad_fd) << '\n';
  out << "max relative error (gradient): " << format_double(chk.grad_rel_err) << '\n';
  out << "max relative error (Hessian): " << format_double(chk.hess_rel_err) << '\n';
  const bool ok = chk.grad_rel_err <= a.tol && chk.hess_rel_err <= a.hess_tol;
  out << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? 0 : kSolverError;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"State-space smoothing with parameter estimation through value-function derivatives", "ssmfit"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run an experiment grid described by a JSON config");
  run->add_option("config", run_args.config, "Run config file")->required()->check(CLI::ExistingFile);
  run->add_option("--output-dir", run_args.output_dir, "Override the config's output_dir");
  run->add_option("--threads", run_args.threads, "Worker threads (overrides the config)")->check(CLI::PositiveNumber);

  FitArgs fit_args;
  auto* fit = app.add_subcommand("fit", "Estimate parameters and states from a series");
  fit->add_option("model", fit_args.model, "ar1, unemployment or a problem JSON file")->required();
  fit->add_option("data", fit_args.data, "CSV series with a header row, one step per row")
      ->required()
      ->check(CLI::ExistingFile);
  fit->add_option("--loss-p", fit_args.loss_p, "Process loss: ls, hybrid:<nu>, t:<nu>")->capture_default_str();
  fit->add_option("--loss-m", fit_args.loss_m, "Measurement loss: ls, hybrid:<nu>, t:<nu>")->capture_default_str();
  fit->add_option("--method", fit_args.method, "newton, lbfgs or lm-newton")->capture_default_str();
  fit->add_option("--theta0", fit_args.theta0, "Initial parameters, comma separated (default zeros)");
  fit->add_option("--states", fit_args.states_out, "Write the smoothed states to this CSV");

  SimulateArgs sim_args;
  auto* sim = app.add_subcommand("simulate", "Generate synthetic data; writes z.csv, x_true.csv, manifest.json");
  sim->add_option("model", sim_args.model, "ar1, unemployment or a problem JSON file")->required();
  sim->add_option("--scenario", sim_args.scenario, "nominal, outliers or jumps")
      ->check(CLI::IsMember({"nominal", "outliers", "jumps"}))
      ->capture_default_str();
  sim->add_option("--seed", sim_args.seed, "Random seed")->capture_default_str();
  sim->add_option("--out", sim_args.out, "Output directory")->capture_default_str();
  sim->add_option("--horizon", sim_args.horizon, "Number of time steps")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sim->add_option("--theta", sim_args.theta, "True parameters, comma separated (ar1: phi,c)");
  sim->add_flag("--jumps-to-measurements", sim_args.jumps_to_measurements,
                "Add jumps to the first measurement instead of the process");

  GradcheckArgs gc_args;
  auto* gc = app.add_subcommand("gradcheck", "Compare value-function derivatives with finite differences");
  gc->add_option("config", gc_args.config, "Run config file")->required()->check(CLI::ExistingFile);
  gc->add_option("--tol", gc_args.tol, "Gradient tolerance")->capture_default_str();
  gc->add_option("--hess-tol", gc_args.hess_tol, "Hessian tolerance")->capture_default_str();
  gc->add_option("--step", gc_args.step, "Central difference step")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : kUsageError;
  }

  try {
    if (run->parsed()) return do_run(run_args, out);
    if (fit->parsed()) return do_fit(fit_args, out);
    if (sim->parsed()) return do_simulate(sim_args, out);
    if (gc->parsed()) return do_gradcheck(gc_args, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const DimensionMismatch& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kSolverError;
  }
  return kUsageError;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace ssmfit
