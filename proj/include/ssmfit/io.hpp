#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssmfit/model.hpp"

namespace ssmfit {

/// Comma-separated numeric table with a header row.
struct Table {
  std::vector<std::string> header;
  Mat data;  // one row per line
};

/// Throws ConfigError with the offending line number on malformed input.
Table read_csv(const std::filesystem::path& path);
/// Values are written with 17 significant digits so they parse back exactly.
void write_csv(const std::filesystem::path& path, const Table& table);
/// Header "<prefix>1", "<prefix>2", ...
std::vector<std::string> numbered_header(const std::string& prefix, Index count);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

nlohmann::json vec_to_json(const VecRef& v);
nlohmann::json mat_to_json(const MatRef& m);
/// `where` names the field in error messages.
Vec vec_from_json(const nlohmann::json& j, const std::string& where);
/// Rows as arrays; `cols` fixes the width when the row list is empty.
Mat mat_from_json(const nlohmann::json& j, const std::string& where, Index cols = -1);

/// Problem files are JSON objects
///
///   { "x0": [...], "z": [[z_1], ..., [z_N]],
///     "dynamics":    [{"base": M, "directions": [M, ...]}, ...]   one per step,
///     "measurement": [{"base": M, "directions": [M, ...]}, ...],
///     "q_factor": [M, ...], "r_factor": [M, ...],
///     "loss_p": "ls", "loss_m": "hybrid:0.7" }
///
/// where M is a list of rows. A single object (or matrix) in place of a list
/// is repeated for every step; "horizon" then fixes N when z is absent.
nlohmann::json problem_to_json(const SsmProblem& problem);
SsmProblem problem_from_json(const nlohmann::json& j);

SsmProblem read_problem(const std::filesystem::path& path);
void write_problem(const std::filesystem::path& path, const SsmProblem& problem);

/// Parses a JSON file; syntax errors report line and column.
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace ssmfit
