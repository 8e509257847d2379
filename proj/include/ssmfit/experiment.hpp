#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmfit/models_zoo.hpp"
#include "ssmfit/outer_opt.hpp"
#include "ssmfit/value_function.hpp"

namespace ssmfit {

struct LossCombo {
  LossSpec process;
  LossSpec measurement;

  /// "ls/H" style label.
  std::string label() const { return process.label() + "/" + measurement.label(); }
};

enum class ModelKind { Unemployment, Ar1, File };

std::string to_string(ModelKind kind);

/// A batch of simulate -> build -> minimize runs over the grid
/// scenarios x losses x methods x seeds.
struct RunConfig {
  ModelKind model = ModelKind::Unemployment;
  std::filesystem::path problem_file;  // ModelKind::File
  UnemploymentSpec unemployment;
  Ar1Spec ar1;
  double ar1_c_true = 1.0;
  /// Problem template for ModelKind::File (loaded by the parser).
  std::optional<SsmProblem> file_problem;

  Vec theta_true;
  std::optional<Vec> theta0;  // zeros when absent
  /// LM-Newton with a Student's t process loss on nominal data starts at
  /// (0, 0, 0.5) unless theta0 is given.
  bool lm_t_start = false;

  std::vector<Scenario> scenarios{Scenario::nominal()};
  std::vector<LossCombo> losses{LossCombo{}};
  std::vector<OuterOptions> methods{OuterOptions{}};
  SmootherPath path = SmootherPath::Auto;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "results";
  bool write_states = false;
  int threads = 1;

  Index n_params() const { return theta_true.size(); }
};

/// Parses a run config; errors name the offending JSON field as a pointer
/// such as "/scenarios/1/frac". `base_dir` resolves a relative problem file.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
/// Reads and parses a config file; syntax errors carry line and column.
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON form of a config (echoed into the run manifest).
nlohmann::json run_config_to_json(const RunConfig& config);

/// One (scenario, losses, method, seed) run.
struct RunRecord {
  std::string scenario;
  std::string loss_p;  // LossSpec::to_string()
  std::string loss_m;
  std::string method;
  std::uint64_t seed = 0;
  std::string status;  // converged / max_iterations / stalled / failed
  std::string error;   // message when failed
  double theta_err2 = 0;
  Vec theta_hat;
  int outer_iters = 0;
  int inner_iters = 0;
  double time_s = 0;
  double state_rmse = 0;
  double v_final = 0;

  /// Sort key (scenario, loss_p, loss_m, method, seed).
  bool operator<(const RunRecord& o) const;
};

/// Problem with simulated data for one grid cell.
struct PreparedRun {
  SsmProblem problem;
  SimulatedData data;
};

PreparedRun prepare_run(const RunConfig& config, const Scenario& scenario, const LossCombo& losses,
                        std::uint64_t seed);

/// Starting point for a method on a grid cell.
Vec initial_theta(const RunConfig& config, const Scenario& scenario, const LossCombo& losses,
                  const OuterOptions& method);

/// Runs the whole grid. Solver failures are recorded per run. Records come
/// back sorted by key.
std::vector<RunRecord> run_experiment(const RunConfig& config);

/// Runs the grid and writes results.csv, summary.csv, manifest.json and, when
/// requested, states/<run>.csv under config.output_dir.
std::vector<RunRecord> run_and_write(const RunConfig& config);

/// results.csv text. With p = 0 only the state RMSE is reported.
void write_results(const std::filesystem::path& path, const std::vector<RunRecord>& records, Index n_params);
std::vector<RunRecord> read_results(const std::filesystem::path& path);

struct SummaryRow {
  std::string scenario, loss_p, loss_m, method;
  int runs = 0;
  int failed = 0;
  double err_mean = 0, err_sd = 0, err_median = 0;
  double outer_mean = 0, inner_mean = 0, time_mean = 0, rmse_mean = 0;
};

/// Aggregates over seeds, failed runs excluded from the statistics.
std::vector<SummaryRow> summarize(const std::vector<RunRecord>& records);
void write_summary(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

}  // namespace ssmfit
