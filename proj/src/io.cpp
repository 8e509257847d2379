#include "ssmfit/io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "ssmfit/errors.hpp"

namespace ssmfit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& text, double& out) {
  const char* first = text.data();
  const char* last = first + text.size();
  if (first != last && *first == '+') ++first;
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> numbered_header(const std::string& prefix, Index count) {
  std::vector<std::string> out;
  for (Index i = 1; i <= count; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

Table read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  Table t;
  std::string line;
  int lineno = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields, found " + std::to_string(cells.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (!parse_double(cells[i], row[i])) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": field '" + t.header[i] +
                          "' is not a number: '" + cells[i] + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw ConfigError(path.string() + ": missing header row");
  t.data.resize(static_cast<Index>(rows.size()), static_cast<Index>(t.header.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) t.data(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  }
  return t;
}

void write_csv(const fs::path& path, const Table& table) {
  if (static_cast<Index>(table.header.size()) != table.data.cols()) {
    throw DimensionMismatch("write_csv: header and data widths differ");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t i = 0; i < table.header.size(); ++i) out << (i ? "," : "") << table.header[i];
  out << '\n';
  for (Index r = 0; r < table.data.rows(); ++r) {
    for (Index c = 0; c < table.data.cols(); ++c) out << (c ? "," : "") << format_double(table.data(r, c));
    out << '\n';
  }
}

json vec_to_json(const VecRef& v) {
  json j = json::array();
  for (Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

json mat_to_json(const MatRef& m) {
  json j = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    j.push_back(std::move(row));
  }
  return j;
}

Vec vec_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of numbers");
  Vec v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(where + "/" + std::to_string(i) + ": expected a number");
    v(static_cast<Index>(i)) = j[i].get<double>();
  }
  return v;
}

Mat mat_from_json(const json& j, const std::string& where, Index cols) {
  if (!j.is_array()) throw ConfigError(where + ": expected a list of rows");
  const Index rows = static_cast<Index>(j.size());
  if (rows > 0) {
    if (!j[0].is_array()) throw ConfigError(where + "/0: expected a row array");
    cols = static_cast<Index>(j[0].size());
  }
  if (cols < 0) cols = 0;
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const std::string at = where + "/" + std::to_string(r);
    const Vec row = vec_from_json(j[static_cast<std::size_t>(r)], at);
    if (row.size() != cols) throw ConfigError(at + ": row has " + std::to_string(row.size()) + " entries, expected " +
                                              std::to_string(cols));
    m.row(r) = row.transpose();
  }
  return m;
}

namespace {

json loss_to_json(const LossSpec& s) {
  if (s.boost == 0) return s.to_string();
  return json{{"kind", s.to_string()}, {"boost", s.boost}};
}

LossSpec loss_from_json(const json& j, const std::string& where) {
  try {
    if (j.is_string()) return LossSpec::parse(j.get<std::string>());
    if (j.is_object() && j.contains("kind") && j["kind"].is_string()) {
      LossSpec s = LossSpec::parse(j["kind"].get<std::string>());
      if (j.contains("boost")) s.boost = j["boost"].get<double>();
      s.validate();
      return s;
    }
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  throw ConfigError(where + ": expected a loss string such as \"ls\" or \"hybrid:0.7\"");
}

json family_to_json(const AffineFamily& f) {
  json dirs = json::array();
  for (const Mat& d : f.directions()) dirs.push_back(mat_to_json(d));
  return json{{"base", mat_to_json(f.base())}, {"directions", dirs}};
}

AffineFamily family_from_json(const json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("base")) throw ConfigError(where + ": expected {\"base\": ..., \"directions\": ...}");
  Mat base = mat_from_json(j["base"], where + "/base");
  std::vector<Mat> dirs;
  if (j.contains("directions")) {
    const json& d = j["directions"];
    if (!d.is_array()) throw ConfigError(where + "/directions: expected a list of matrices");
    for (std::size_t i = 0; i < d.size(); ++i) {
      dirs.push_back(mat_from_json(d[i], where + "/directions/" + std::to_string(i), base.cols()));
    }
  }
  try {
    return AffineFamily(std::move(base), std::move(dirs));
  } catch (const DimensionMismatch& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

// A list with one entry per step, or a single entry repeated.
template <class T, class F>
std::vector<T> per_step(const json& j, Index horizon, const std::string& where, bool single_is_list_of_rows, F parse) {
  bool single = !j.is_array();
  if (single_is_list_of_rows) {
    single = j.is_array() && (j.empty() || (j[0].is_array() && (j[0].empty() || j[0][0].is_number())));
  }
  std::vector<T> out;
  if (single) {
    T item = parse(j, where);
    out.assign(static_cast<std::size_t>(horizon), item);
    return out;
  }
  if (!j.is_array()) throw ConfigError(where + ": expected a list with one entry per step");
  if (static_cast<Index>(j.size()) != horizon) {
    throw ConfigError(where + ": has " + std::to_string(j.size()) + " entries, expected " + std::to_string(horizon));
  }
  for (std::size_t k = 0; k < j.size(); ++k) out.push_back(parse(j[k], where + "/" + std::to_string(k)));
  return out;
}

const json& field(const json& j, const char* name) {
  if (!j.contains(name)) throw ConfigError(std::string("/") + name + ": required field missing");
  return j[name];
}

}  // namespace

json problem_to_json(const SsmProblem& p) {
  json dyn = json::array(), meas = json::array(), q = json::array(), r = json::array();
  for (const auto& f : p.dynamics) dyn.push_back(family_to_json(f));
  for (const auto& f : p.measurement) meas.push_back(family_to_json(f));
  for (Index k = 0; k < p.horizon(); ++k) {
    q.push_back(mat_to_json(p.q_factor.block(k)));
    r.push_back(mat_to_json(p.r_factor.block(k)));
  }
  Mat z(p.horizon(), p.meas_dim());
  for (Index k = 0; k < p.horizon(); ++k) z.row(k) = p.z.segment(k * p.meas_dim(), p.meas_dim()).transpose();
  return json{{"horizon", p.horizon()},
              {"x0", vec_to_json(p.x0)},
              {"z", mat_to_json(z)},
              {"dynamics", dyn},
              {"measurement", meas},
              {"q_factor", q},
              {"r_factor", r},
              {"loss_p", loss_to_json(p.loss_p)},
              {"loss_m", loss_to_json(p.loss_m)}};
}

SsmProblem problem_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("problem: expected a JSON object");
  static const char* known[] = {"horizon", "x0", "z", "dynamics", "measurement", "q_factor", "r_factor", "loss_p", "loss_m"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ConfigError("/" + key + ": unknown field");
    }
  }
  SsmProblem p;
  p.x0 = vec_from_json(field(j, "x0"), "/x0");

  Index horizon = -1;
  if (j.contains("horizon")) {
    if (!j["horizon"].is_number_integer() || j["horizon"].get<Index>() < 1) {
      throw ConfigError("/horizon: expected a positive integer");
    }
    horizon = j["horizon"].get<Index>();
  }
  Mat z;
  if (j.contains("z")) {
    z = mat_from_json(j["z"], "/z");
    if (horizon >= 0 && z.rows() != horizon) {
      throw ConfigError("/z: has " + std::to_string(z.rows()) + " rows but horizon is " + std::to_string(horizon));
    }
    horizon = z.rows();
  }
  if (horizon < 1) throw ConfigError("/horizon: needed when z is absent");

  auto fam = [](const json& e, const std::string& w) { return family_from_json(e, w); };
  auto mat = [](const json& e, const std::string& w) { return mat_from_json(e, w, 0); };
  p.dynamics = per_step<AffineFamily>(field(j, "dynamics"), horizon, "/dynamics", false, fam);
  p.measurement = per_step<AffineFamily>(field(j, "measurement"), horizon, "/measurement", false, fam);
  try {
    p.q_factor = CovFactor(per_step<Mat>(field(j, "q_factor"), horizon, "/q_factor", true, mat));
    p.r_factor = CovFactor(per_step<Mat>(field(j, "r_factor"), horizon, "/r_factor", true, mat));
  } catch (const DimensionMismatch& e) {
    throw ConfigError(std::string("covariance factors: ") + e.what());
  }
  p.loss_p = j.contains("loss_p") ? loss_from_json(j["loss_p"], "/loss_p") : LossSpec{};
  p.loss_m = j.contains("loss_m") ? loss_from_json(j["loss_m"], "/loss_m") : LossSpec{};
  if (z.size() == 0 && z.rows() == 0) z = Mat::Zero(horizon, p.meas_dim());
  if (z.cols() != p.meas_dim()) {
    throw ConfigError("/z: rows have " + std::to_string(z.cols()) + " entries, measurement dimension is " +
                      std::to_string(p.meas_dim()));
  }
  p.z.resize(z.size());
  for (Index k = 0; k < z.rows(); ++k) p.z.segment(k * z.cols(), z.cols()) = z.row(k).transpose();
  try {
    p.validate();
  } catch (const DimensionMismatch& e) {
    throw ConfigError(std::string("problem: ") + e.what());
  }
  return p;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

SsmProblem read_problem(const fs::path& path) {
  const json j = read_json(path);
  try {
    return problem_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_problem(const fs::path& path, const SsmProblem& problem) { write_json(path, problem_to_json(problem)); }

}  // namespace ssmfit
