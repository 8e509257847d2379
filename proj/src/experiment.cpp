#include "ssmfit/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "ssmfit/errors.hpp"
#include "ssmfit/io.hpp"

namespace ssmfit {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Unemployment:
      return "unemployment";
    case ModelKind::Ar1:
      return "ar1";
    case ModelKind::File:
      return "file";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

// A JSON object being consumed field by field; leftovers are reported.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(path() + ": expected an object");
  }

  std::string path() const { return where_.empty() ? "/" : where_; }
  std::string at(const std::string& key) const { return where_ + "/" + key; }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  const json& require(const std::string& key) {
    const json* v = get(key);
    if (v == nullptr) throw ConfigError(at(key) + ": required field missing");
    return *v;
  }
  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(at(key) + ": unknown field");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

double as_number(const json& j, const std::string& where) {
  if (!j.is_number()) throw ConfigError(where + ": expected a number");
  return j.get<double>();
}

long long as_integer(const json& j, const std::string& where) {
  if (!j.is_number_integer()) throw ConfigError(where + ": expected an integer");
  return j.get<long long>();
}

bool as_bool(const json& j, const std::string& where) {
  if (!j.is_boolean()) throw ConfigError(where + ": expected true or false");
  return j.get<bool>();
}

std::string as_string(const json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError(where + ": expected a string");
  return j.get<std::string>();
}

template <class F>
auto rethrow_at(const std::string& where, F f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind('/', 0) == 0) throw;
    throw ConfigError(where + ": " + msg);
  }
}

LossSpec parse_loss(const json& j, const std::string& where) {
  return rethrow_at(where, [&] { return LossSpec::parse(as_string(j, where)); });
}

Scenario parse_scenario(const json& j, const std::string& where, Index horizon) {
  Scenario s;
  if (j.is_string()) {
    s = rethrow_at(where, [&] { return Scenario::parse(j.get<std::string>()); });
  } else {
    Fields f(j, where);
    s = rethrow_at(f.at("kind"), [&] { return Scenario::parse(as_string(f.require("kind"), f.at("kind"))); });
    if (s.kind == Scenario::Kind::Outliers) {
      if (const json* v = f.get("frac")) s.outlier_frac = as_number(*v, f.at("frac"));
      if (const json* v = f.get("sd")) s.outlier_sd = as_number(*v, f.at("sd"));
      if (!(s.outlier_frac > 0 && s.outlier_frac < 1)) throw ConfigError(f.at("frac") + ": must lie in (0, 1)");
      if (!(s.outlier_sd >= 0)) throw ConfigError(f.at("sd") + ": must be non-negative");
    }
    if (s.kind == Scenario::Kind::Jumps) {
      if (const json* v = f.get("jumps")) {
        if (!v->is_array()) throw ConfigError(f.at("jumps") + ": expected a list of [index, magnitude] pairs");
        s.jumps.clear();
        for (std::size_t i = 0; i < v->size(); ++i) {
          const std::string w = f.at("jumps") + "/" + std::to_string(i);
          const json& e = (*v)[i];
          if (!e.is_array() || e.size() != 2) throw ConfigError(w + ": expected [index, magnitude]");
          s.jumps.emplace_back(static_cast<Index>(as_integer(e[0], w + "/0")), as_number(e[1], w + "/1"));
        }
      }
      if (const json* v = f.get("target")) {
        const std::string t = as_string(*v, f.at("target"));
        if (t != "process" && t != "measurement") {
          throw ConfigError(f.at("target") + ": expected \"process\" or \"measurement\"");
        }
        s.jumps_in_measurements = t == "measurement";
      }
      for (std::size_t i = 0; i < s.jumps.size(); ++i) {
        if (s.jumps[i].first < 0 || s.jumps[i].first >= horizon) {
          throw ConfigError(f.at("jumps") + "/" + std::to_string(i) + "/0: index outside [0, " +
                            std::to_string(horizon) + ")");
        }
      }
    }
    f.finish();
  }
  return s;
}

OuterOptions parse_method(const json& j, const std::string& where, const OuterOptions& defaults) {
  OuterOptions o = defaults;
  if (j.is_string()) {
    o.method = rethrow_at(where, [&] { return parse_outer_method(j.get<std::string>()); });
  } else {
    Fields f(j, where);
    o.method = rethrow_at(f.at("name"), [&] { return parse_outer_method(as_string(f.require("name"), f.at("name"))); });
    if (const json* v = f.get("theta0")) o.theta0 = vec_from_json(*v, f.at("theta0"));
    if (const json* v = f.get("grad_tol")) o.grad_tol = as_number(*v, f.at("grad_tol"));
    if (const json* v = f.get("max_outer")) o.max_outer = static_cast<int>(as_integer(*v, f.at("max_outer")));
    if (const json* v = f.get("memory")) o.memory = static_cast<int>(as_integer(*v, f.at("memory")));
    if (const json* v = f.get("lm_damping0")) o.lm_damping0 = as_number(*v, f.at("lm_damping0"));
    f.finish();
  }
  rethrow_at(where, [&] {
    o.validate();
    return 0;
  });
  return o;
}

SmootherPath parse_path(const std::string& s, const std::string& where) {
  if (s == "auto") return SmootherPath::Auto;
  if (s == "nonsingular") return SmootherPath::Nonsingular;
  if (s == "singular") return SmootherPath::Singular;
  throw ConfigError(where + ": expected \"auto\", \"nonsingular\" or \"singular\"");
}

json scenario_to_json(const Scenario& s) {
  json j{{"kind", s.name()}};
  if (s.kind == Scenario::Kind::Outliers) {
    j["frac"] = s.outlier_frac;
    j["sd"] = s.outlier_sd;
  }
  if (s.kind == Scenario::Kind::Jumps) {
    json list = json::array();
    for (const auto& [k, mag] : s.jumps) list.push_back(json::array({k, mag}));
    j["jumps"] = list;
    j["target"] = s.jumps_in_measurements ? "measurement" : "process";
  }
  return j;
}

json method_to_json(const OuterOptions& o) {
  json j{{"name", to_string(o.method)}, {"max_outer", o.max_outer}};
  if (o.theta0.size() > 0) j["theta0"] = vec_to_json(o.theta0);
  if (o.grad_tol) j["grad_tol"] = *o.grad_tol;
  if (o.method == OuterMethod::Lbfgs) j["memory"] = o.memory;
  if (o.method == OuterMethod::LmNewton) j["lm_damping0"] = o.lm_damping0;
  return j;
}

}  // namespace

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  RunConfig c;
  Fields f(j, "");

  // Model.
  const json& model = f.require("model");
  if (model.is_string()) {
    const std::string name = model.get<std::string>();
    if (name == "unemployment") {
      c.model = ModelKind::Unemployment;
    } else if (name == "ar1") {
      c.model = ModelKind::Ar1;
    } else {
      throw ConfigError("/model: expected \"unemployment\", \"ar1\" or {\"file\": path}");
    }
  } else {
    Fields mf(model, "/model");
    c.model = ModelKind::File;
    c.problem_file = as_string(mf.require("file"), "/model/file");
    mf.finish();
    const fs::path resolved = c.problem_file.is_absolute() ? c.problem_file : base_dir / c.problem_file;
    if (!fs::exists(resolved)) throw ConfigError("/model/file: no such file " + resolved.string());
    c.file_problem = read_problem(resolved);
  }

  Index horizon = 100;
  if (const json* v = f.get("horizon")) {
    horizon = static_cast<Index>(as_integer(*v, "/horizon"));
    if (horizon < 1) throw ConfigError("/horizon: must be positive");
  }
  if (c.file_problem) {
    if (f.get("horizon") && horizon != c.file_problem->horizon()) {
      throw ConfigError("/horizon: differs from the problem file's horizon " +
                        std::to_string(c.file_problem->horizon()));
    }
    horizon = c.file_problem->horizon();
  }
  c.unemployment.horizon = horizon;
  c.ar1.horizon = horizon;

  if (const json* v = f.get("model_params")) {
    Fields pf(*v, "/model_params");
    if (c.model == ModelKind::Unemployment) {
      if (const json* e = pf.get("x0")) c.unemployment.x0 = vec_from_json(*e, pf.at("x0"));
      if (const json* e = pf.get("q_innov")) c.unemployment.q_innov = vec_from_json(*e, pf.at("q_innov"));
      if (const json* e = pf.get("r_meas")) c.unemployment.r_meas = vec_from_json(*e, pf.at("r_meas"));
    } else if (c.model == ModelKind::Ar1) {
      if (const json* e = pf.get("h")) c.ar1.h = as_number(*e, pf.at("h"));
      if (const json* e = pf.get("q0")) c.ar1.q0 = as_number(*e, pf.at("q0"));
      if (const json* e = pf.get("q")) c.ar1.q = as_number(*e, pf.at("q"));
      if (const json* e = pf.get("r")) c.ar1.r = as_number(*e, pf.at("r"));
      if (const json* e = pf.get("x0")) c.ar1.x0 = vec_from_json(*e, pf.at("x0"));
      if (const json* e = pf.get("c_true")) c.ar1_c_true = as_number(*e, pf.at("c_true"));
    }
    pf.finish();
  }
  if (c.model == ModelKind::Unemployment) rethrow_at("/model_params", [&] {
      c.unemployment.validate();
      return 0;
    });
  if (c.model == ModelKind::Ar1) rethrow_at("/model_params", [&] {
      c.ar1.validate();
      return 0;
    });

  const Index p = c.model == ModelKind::Unemployment ? 3 : c.model == ModelKind::Ar1 ? 1 : c.file_problem->n_params();
  if (const json* v = f.get("theta_true")) {
    c.theta_true = vec_from_json(*v, "/theta_true");
  } else if (c.model == ModelKind::Unemployment) {
    c.theta_true = c.unemployment.theta_true;
  } else if (c.model == ModelKind::Ar1) {
    c.theta_true = (Vec(1) << 0.8).finished();
  } else {
    c.theta_true = Vec::Zero(p);
    if (p > 0) throw ConfigError("/theta_true: required for a problem file with parameters");
  }
  if (c.theta_true.size() != p) {
    throw ConfigError("/theta_true: has " + std::to_string(c.theta_true.size()) + " entries, the model has " +
                      std::to_string(p) + " parameters");
  }
  if (c.model == ModelKind::Unemployment) c.unemployment.theta_true = c.theta_true;

  if (const json* v = f.get("theta0")) {
    c.theta0 = vec_from_json(*v, "/theta0");
    if (c.theta0->size() != p) throw ConfigError("/theta0: expected " + std::to_string(p) + " entries");
  }
  if (const json* v = f.get("lm_t_start")) c.lm_t_start = as_bool(*v, "/lm_t_start");

  if (const json* v = f.get("scenarios")) {
    if (!v->is_array() || v->empty()) throw ConfigError("/scenarios: expected a non-empty list");
    c.scenarios.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      c.scenarios.push_back(parse_scenario((*v)[i], "/scenarios/" + std::to_string(i), horizon));
    }
  }

  if (const json* v = f.get("losses")) {
    if (!v->is_array() || v->empty()) throw ConfigError("/losses: expected a non-empty list");
    c.losses.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      const std::string w = "/losses/" + std::to_string(i);
      const json& e = (*v)[i];
      LossCombo combo;
      if (e.is_array()) {
        if (e.size() != 2) throw ConfigError(w + ": expected [process, measurement]");
        combo.process = parse_loss(e[0], w + "/0");
        combo.measurement = parse_loss(e[1], w + "/1");
      } else {
        Fields lf(e, w);
        combo.process = parse_loss(lf.require("process"), lf.at("process"));
        combo.measurement = parse_loss(lf.require("measurement"), lf.at("measurement"));
        lf.finish();
      }
      c.losses.push_back(combo);
    }
  }

  OuterOptions defaults;
  if (const json* v = f.get("grad_tol")) defaults.grad_tol = as_number(*v, "/grad_tol");
  if (const json* v = f.get("max_outer")) defaults.max_outer = static_cast<int>(as_integer(*v, "/max_outer"));
  rethrow_at("/", [&] {
    defaults.validate();
    return 0;
  });
  c.methods = {defaults};
  if (const json* v = f.get("methods")) {
    if (!v->is_array() || v->empty()) throw ConfigError("/methods: expected a non-empty list");
    c.methods.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      OuterOptions o = parse_method((*v)[i], "/methods/" + std::to_string(i), defaults);
      if (o.theta0.size() > 0 && o.theta0.size() != p) {
        throw ConfigError("/methods/" + std::to_string(i) + "/theta0: expected " + std::to_string(p) + " entries");
      }
      c.methods.push_back(o);
    }
  }

  if (const json* v = f.get("smoother")) c.path = parse_path(as_string(*v, "/smoother"), "/smoother");

  if (const json* v = f.get("seeds")) {
    c.seeds.clear();
    if (v->is_array()) {
      for (std::size_t i = 0; i < v->size(); ++i) {
        const long long s = as_integer((*v)[i], "/seeds/" + std::to_string(i));
        if (s < 0) throw ConfigError("/seeds/" + std::to_string(i) + ": must be non-negative");
        c.seeds.push_back(static_cast<std::uint64_t>(s));
      }
    } else {
      Fields sf(*v, "/seeds");
      const long long first = as_integer(sf.require("first"), "/seeds/first");
      const long long count = as_integer(sf.require("count"), "/seeds/count");
      sf.finish();
      if (first < 0 || count < 0) throw ConfigError("/seeds: first and count must be non-negative");
      for (long long s = 0; s < count; ++s) c.seeds.push_back(static_cast<std::uint64_t>(first + s));
    }
    if (c.seeds.empty()) throw ConfigError("/seeds: need at least one seed");
  }

  if (const json* v = f.get("output_dir")) c.output_dir = as_string(*v, "/output_dir");
  if (const json* v = f.get("write_states")) c.write_states = as_bool(*v, "/write_states");
  if (const json* v = f.get("threads")) {
    c.threads = static_cast<int>(as_integer(*v, "/threads"));
    if (c.threads < 1) throw ConfigError("/threads: must be at least 1");
  }
  f.finish();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  const json j = read_json(path);
  try {
    return parse_run_config(j, path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json run_config_to_json(const RunConfig& c) {
  json j;
  if (c.model == ModelKind::File) {
    j["model"] = json{{"file", c.problem_file.string()}};
  } else {
    j["model"] = to_string(c.model);
  }
  j["horizon"] = c.model == ModelKind::Ar1 ? c.ar1.horizon : c.model == ModelKind::Unemployment
                                                                  ? c.unemployment.horizon
                                                                  : c.file_problem->horizon();
  if (c.model == ModelKind::Unemployment) {
    j["model_params"] = {{"x0", vec_to_json(c.unemployment.x0)},
                         {"q_innov", vec_to_json(c.unemployment.q_innov)},
                         {"r_meas", vec_to_json(c.unemployment.r_meas)}};
  } else if (c.model == ModelKind::Ar1) {
    j["model_params"] = {{"h", c.ar1.h},   {"q0", c.ar1.q0}, {"q", c.ar1.q}, {"r", c.ar1.r},
                         {"x0", vec_to_json(c.ar1.x0)}, {"c_true", c.ar1_c_true}};
  }
  j["theta_true"] = vec_to_json(c.theta_true);
  if (c.theta0) j["theta0"] = vec_to_json(*c.theta0);
  j["lm_t_start"] = c.lm_t_start;
  j["scenarios"] = json::array();
  for (const auto& s : c.scenarios) j["scenarios"].push_back(scenario_to_json(s));
  j["losses"] = json::array();
  for (const auto& l : c.losses) j["losses"].push_back(json::array({l.process.to_string(), l.measurement.to_string()}));
  j["methods"] = json::array();
  for (const auto& m : c.methods) j["methods"].push_back(method_to_json(m));
  j["smoother"] = to_string(c.path);
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir.string();
  j["write_states"] = c.write_states;
  j["threads"] = c.threads;
  return j;
}

// ---------------------------------------------------------------------------
// Running

bool RunRecord::operator<(const RunRecord& o) const {
  return std::tie(scenario, loss_p, loss_m, method, seed) < std::tie(o.scenario, o.loss_p, o.loss_m, o.method, o.seed);
}

PreparedRun prepare_run(const RunConfig& c, const Scenario& scenario, const LossCombo& losses, std::uint64_t seed) {
  switch (c.model) {
    case ModelKind::Unemployment: {
      UnemploymentSpec spec = c.unemployment;
      spec.loss_p = losses.process;
      spec.loss_m = losses.measurement;
      SimulatedData data = simulate_unemployment(spec, c.theta_true, scenario, seed);
      SsmProblem problem = build_unemployment(spec, data.z);
      return {std::move(problem), std::move(data)};
    }
    case ModelKind::Ar1: {
      Ar1Spec spec = c.ar1;
      spec.loss_p = losses.process;
      spec.loss_m = losses.measurement;
      SimulatedData data = simulate_ar1(spec, c.theta_true(0), c.ar1_c_true, scenario, seed);
      SsmProblem problem = build_ar1(spec, data.z);
      return {std::move(problem), std::move(data)};
    }
    case ModelKind::File: {
      SsmProblem problem = *c.file_problem;
      problem.loss_p = losses.process;
      problem.loss_m = losses.measurement;
      SimulatedData data = simulate(problem, c.theta_true, scenario, seed, 0);
      problem.z = stack_rows(data.z);
      return {std::move(problem), std::move(data)};
    }
  }
  throw ConfigError("unknown model kind");
}

Vec initial_theta(const RunConfig& c, const Scenario& scenario, const LossCombo& losses, const OuterOptions& method) {
  if (method.theta0.size() > 0) return method.theta0;
  if (c.theta0) return *c.theta0;
  if (c.lm_t_start && c.model == ModelKind::Unemployment && method.method == OuterMethod::LmNewton &&
      losses.process.kind == LossKind::StudentT && scenario.kind == Scenario::Kind::Nominal) {
    return (Vec(3) << 0.0, 0.0, 0.5).finished();
  }
  return Vec::Zero(c.n_params());
}

namespace {

struct Task {
  const Scenario* scenario;
  const LossCombo* losses;
  const OuterOptions* method;
  std::uint64_t seed;
};

std::string file_token(std::string s) {
  for (char& ch : s) {
    if (ch == ':' || ch == '/' || ch == ' ') ch = '-';
  }
  return s;
}

std::string sanitize(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  }
  return s;
}

double state_rmse(const Vec& solution, const Mat& x_true) {
  const Index n = x_true.cols();
  double sum = 0;
  for (Index k = 0; k < x_true.rows(); ++k) sum += (solution.segment(k * n, n) - x_true.row(k).transpose()).squaredNorm();
  return std::sqrt(sum / static_cast<double>(x_true.size()));
}

void write_states(const fs::path& path, const Vec& solution, const SimulatedData& data) {
  const Index n = data.x_true.cols();
  const Index m = data.z.cols();
  const Index big_n = data.x_true.rows();
  Table t;
  t.header = {"k"};
  for (const auto& h : numbered_header("x_true", n)) t.header.push_back(h);
  for (const auto& h : numbered_header("x_hat", n)) t.header.push_back(h);
  for (const auto& h : numbered_header("z", m)) t.header.push_back(h);
  t.data.resize(big_n, 1 + 2 * n + m);
  for (Index k = 0; k < big_n; ++k) {
    t.data(k, 0) = static_cast<double>(k + 1);
    t.data.row(k).segment(1, n) = data.x_true.row(k);
    t.data.row(k).segment(1 + n, n) = solution.segment(k * n, n).transpose();
    t.data.row(k).segment(1 + 2 * n, m) = data.z.row(k);
  }
  write_csv(path, t);
}

RunRecord run_one(const RunConfig& c, const Task& task, const fs::path* states_dir) {
  RunRecord rec;
  rec.scenario = task.scenario->name();
  rec.loss_p = task.losses->process.to_string();
  rec.loss_m = task.losses->measurement.to_string();
  rec.method = c.n_params() == 0 ? "none" : to_string(task.method->method);
  rec.seed = task.seed;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  rec.theta_hat = Vec::Constant(c.n_params(), nan);
  rec.theta_err2 = rec.time_s = rec.state_rmse = rec.v_final = nan;
  try {
    PreparedRun run = prepare_run(c, *task.scenario, *task.losses, task.seed);
    ValueFunction vf(run.problem, c.path);
    Vec solution;
    if (c.n_params() == 0) {
      ValueReport rep = vf(Vec(), false);
      rec.status = "converged";
      rec.inner_iters = rep.inner_iters;
      rec.v_final = rep.v;
      solution = rep.solution;
      rec.theta_err2 = 0;
      rec.time_s = 0;
    } else {
      OuterOptions opts = *task.method;
      opts.theta0 = initial_theta(c, *task.scenario, *task.losses, *task.method);
      const OuterResult res = minimize([&](const VecRef& th, bool want_h) { return vf(th, want_h); }, opts);
      rec.status = to_string(res.trace.status);
      rec.theta_hat = res.theta;
      rec.theta_err2 = (res.theta - c.theta_true).squaredNorm();
      rec.outer_iters = res.trace.outer_iters;
      rec.inner_iters = res.trace.inner_iters;
      rec.time_s = res.trace.wall_time;
      rec.v_final = res.report.v;
      solution = res.report.solution;
    }
    rec.state_rmse = state_rmse(solution, run.data.x_true);
    if (states_dir != nullptr) {
      const std::string name = file_token(rec.scenario + "_" + rec.loss_p + "_" + rec.loss_m + "_" + rec.method +
                                          "_seed" + std::to_string(rec.seed)) +
                               ".csv";
      write_states(*states_dir / name, solution, run.data);
    }
  } catch (const Error& e) {
    rec.status = "failed";
    rec.error = sanitize(e.what());
  }
  return rec;
}

}  // namespace

namespace {

std::vector<RunRecord> run_grid(const RunConfig& c, const fs::path* states_dir) {
  std::vector<Task> tasks;
  const std::vector<OuterOptions> single{OuterOptions{}};
  const auto& methods = c.n_params() == 0 ? single : c.methods;
  for (const auto& s : c.scenarios) {
    for (const auto& l : c.losses) {
      for (const auto& m : methods) {
        for (std::uint64_t seed : c.seeds) tasks.push_back({&s, &l, &m, seed});
      }
    }
  }
  std::vector<RunRecord> records(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) records[i] = run_one(c, tasks[i], states_dir);
  };
  const int n_threads = std::max(1, std::min<int>(c.threads, static_cast<int>(tasks.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  std::sort(records.begin(), records.end());
  return records;
}

}  // namespace

std::vector<RunRecord> run_experiment(const RunConfig& config) { return run_grid(config, nullptr); }

std::vector<RunRecord> run_and_write(const RunConfig& config) {
  fs::create_directories(config.output_dir);
  const fs::path states_dir = config.output_dir / "states";
  if (config.write_states) fs::create_directories(states_dir);
  auto records = run_grid(config, config.write_states ? &states_dir : nullptr);
  write_results(config.output_dir / "results.csv", records, config.n_params());
  write_summary(config.output_dir / "summary.csv", summarize(records));
  json manifest{{"config", run_config_to_json(config)},
                {"runs", records.size()},
                {"failed", std::count_if(records.begin(), records.end(),
                                         [](const RunRecord& r) { return r.status == "failed"; })}};
  write_json(config.output_dir / "manifest.json", manifest);
  return records;
}

// ---------------------------------------------------------------------------
// Results files

void write_results(const fs::path& path, const std::vector<RunRecord>& records, Index n_params) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  if (n_params == 0) {
    out << "scenario,loss_p,loss_m,seed,status,state_rmse,error\n";
    for (const auto& r : records) {
      out << r.scenario << ',' << r.loss_p << ',' << r.loss_m << ',' << r.seed << ',' << r.status << ','
          << format_double(r.state_rmse) << ',' << r.error << '\n';
    }
    return;
  }
  out << "scenario,loss_p,loss_m,method,seed,status,theta_err2";
  for (const auto& h : numbered_header("theta_hat_", n_params)) out << ',' << h;
  out << ",outer_iters,inner_iters,time_s,state_rmse,v_final,error\n";
  for (const auto& r : records) {
    out << r.scenario << ',' << r.loss_p << ',' << r.loss_m << ',' << r.method << ',' << r.seed << ',' << r.status
        << ',' << format_double(r.theta_err2);
    for (Index j = 0; j < n_params; ++j) out << ',' << format_double(r.theta_hat(j));
    out << ',' << r.outer_iters << ',' << r.inner_iters << ',' << format_double(r.time_s) << ','
        << format_double(r.state_rmse) << ',' << format_double(r.v_final) << ',' << r.error << '\n';
  }
}

namespace {

double to_double(const std::string& s, const std::string& where) {
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(where + ": not a number: '" + s + "'");
}

}  // namespace

std::vector<RunRecord> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty file");
  std::vector<std::string> header;
  {
    std::istringstream is(line);
    std::string cell;
    while (std::getline(is, cell, ',')) header.push_back(cell);
  }
  auto col = [&](const std::string& name) -> int {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  std::vector<int> theta_cols;
  for (int j = 1; col("theta_hat_" + std::to_string(j)) >= 0; ++j) theta_cols.push_back(col("theta_hat_" + std::to_string(j)));

  std::vector<RunRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream is(line);
    std::string cell;
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != header.size()) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                        " fields");
    }
    const std::string where = path.string() + ":" + std::to_string(lineno);
    auto get = [&](const std::string& name) -> std::string {
      const int c = col(name);
      return c < 0 ? std::string() : cells[static_cast<std::size_t>(c)];
    };
    RunRecord r;
    r.scenario = get("scenario");
    r.loss_p = get("loss_p");
    r.loss_m = get("loss_m");
    r.method = col("method") >= 0 ? get("method") : "none";
    r.seed = static_cast<std::uint64_t>(std::stoull(get("seed")));
    r.status = get("status");
    r.error = get("error");
    r.state_rmse = to_double(get("state_rmse"), where);
    if (col("theta_err2") >= 0) {
      r.theta_err2 = to_double(get("theta_err2"), where);
      r.theta_hat.resize(static_cast<Index>(theta_cols.size()));
      for (std::size_t j = 0; j < theta_cols.size(); ++j) {
        r.theta_hat(static_cast<Index>(j)) = to_double(cells[static_cast<std::size_t>(theta_cols[j])], where);
      }
      r.outer_iters = std::stoi(get("outer_iters"));
      r.inner_iters = std::stoi(get("inner_iters"));
      r.time_s = to_double(get("time_s"), where);
      r.v_final = to_double(get("v_final"), where);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records) {
  std::map<std::tuple<std::string, std::string, std::string, std::string>, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) groups[{r.scenario, r.loss_p, r.loss_m, r.method}].push_back(&r);
  std::vector<SummaryRow> out;
  for (const auto& [key, rs] : groups) {
    SummaryRow row;
    std::tie(row.scenario, row.loss_p, row.loss_m, row.method) = key;
    row.runs = static_cast<int>(rs.size());
    std::vector<double> errs;
    double outer = 0, inner = 0, time = 0, rmse = 0;
    for (const RunRecord* r : rs) {
      if (r->status == "failed") {
        ++row.failed;
        continue;
      }
      errs.push_back(r->theta_err2);
      outer += r->outer_iters;
      inner += r->inner_iters;
      time += r->time_s;
      rmse += r->state_rmse;
    }
    const double n = static_cast<double>(errs.size());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (errs.empty()) {
      row.err_mean = row.err_sd = row.err_median = row.outer_mean = row.inner_mean = row.time_mean = row.rmse_mean = nan;
    } else {
      double mean = 0;
      for (double e : errs) mean += e;
      mean /= n;
      double ss = 0;
      for (double e : errs) ss += (e - mean) * (e - mean);
      std::sort(errs.begin(), errs.end());
      const std::size_t mid = errs.size() / 2;
      row.err_mean = mean;
      row.err_sd = errs.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
      row.err_median = errs.size() % 2 ? errs[mid] : 0.5 * (errs[mid - 1] + errs[mid]);
      row.outer_mean = outer / n;
      row.inner_mean = inner / n;
      row.time_mean = time / n;
      row.rmse_mean = rmse / n;
    }
    out.push_back(row);
  }
  return out;
}

void write_summary(const fs::path& path, const std::vector<SummaryRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "scenario,loss_p,loss_m,method,runs,failed,err_mean,err_sd,err_median,outer_mean,inner_mean,time_mean,"
         "state_rmse_mean\n";
  for (const auto& r : rows) {
    out << r.scenario << ',' << r.loss_p << ',' << r.loss_m << ',' << r.method << ',' << r.runs << ',' << r.failed
        << ',' << format_double(r.err_mean) << ',' << format_double(r.err_sd) << ',' << format_double(r.err_median)
        << ',' << format_double(r.outer_mean) << ',' << format_double(r.inner_mean) << ','
        << format_double(r.time_mean) << ',' << format_double(r.rmse_mean) << '\n';
  }
}

}  // namespace ssmfit
