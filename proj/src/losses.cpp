#include "ssmfit/losses.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "ssmfit/errors.hpp"

namespace ssmfit {

void LossSpec::validate() const {
  if (kind != LossKind::LeastSquares && !(nu > 0)) {
    throw ConfigError("loss parameter nu must be positive, got " + std::to_string(nu));
  }
  if (!(boost >= 0)) throw ConfigError("loss boost must be nonnegative");
}

LossSpec LossSpec::parse(const std::string& text) {
  const auto colon = text.find(':');
  std::string name = text.substr(0, colon);
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  LossSpec spec;
  if (name == "ls" || name == "least_squares" || name == "leastsquares") {
    if (colon != std::string::npos) throw ConfigError("least squares takes no parameter: '" + text + "'");
    return spec;
  }
  if (name == "hybrid" || name == "h") {
    spec.kind = LossKind::Hybrid;
  } else if (name == "t" || name == "student" || name == "studentt" || name == "student_t") {
    spec.kind = LossKind::StudentT;
  } else {
    throw ConfigError("unknown loss '" + text + "' (expected ls, hybrid:<nu> or t:<nu>)");
  }
  if (colon == std::string::npos) throw ConfigError("loss '" + text + "' needs a parameter, e.g. hybrid:0.7");
  const std::string arg = text.substr(colon + 1);
  std::size_t used = 0;
  try {
    spec.nu = std::stod(arg, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != arg.size()) throw ConfigError("bad loss parameter in '" + text + "'");
  spec.validate();
  return spec;
}

std::string LossSpec::label() const {
  switch (kind) {
    case LossKind::LeastSquares:
      return "ls";
    case LossKind::Hybrid:
      return "H";
    case LossKind::StudentT:
      return "T";
  }
  return "?";
}

std::string LossSpec::to_string() const {
  // Shortest text that parses back to the same nu.
  char buf[32];
  const auto num = [&] { return std::string(buf, std::to_chars(buf, buf + sizeof buf, nu).ptr); };
  switch (kind) {
    case LossKind::LeastSquares:
      return "ls";
    case LossKind::Hybrid:
      return "hybrid:" + num();
    case LossKind::StudentT:
      return "t:" + num();
  }
  return "unknown";
}

double loss_value(const LossSpec& spec, const VecRef& r) {
  switch (spec.kind) {
    case LossKind::LeastSquares:
      return 0.5 * r.squaredNorm();
    case LossKind::Hybrid: {
      const double nu = spec.nu;
      double s = 0;
      // sqrt(r^2 + nu^2) - nu written without cancellation for small r.
      for (Index i = 0; i < r.size(); ++i) {
        const double r2 = r(i) * r(i);
        s += r2 / (std::sqrt(r2 + nu * nu) + nu);
      }
      return s;
    }
    case LossKind::StudentT: {
      double s = 0;
      for (Index i = 0; i < r.size(); ++i) s += std::log1p(r(i) * r(i) / spec.nu);
      return s;
    }
  }
  return 0;
}

Vec loss_grad(const LossSpec& spec, const VecRef& r) {
  switch (spec.kind) {
    case LossKind::LeastSquares:
      return r;
    case LossKind::Hybrid:
      return r.array() / (r.array().square() + spec.nu * spec.nu).sqrt();
    case LossKind::StudentT:
      return 2.0 * r.array() / (spec.nu + r.array().square());
  }
  return r;
}

namespace {

Vec raw_curvature(const LossSpec& spec, const VecRef& r) {
  switch (spec.kind) {
    case LossKind::LeastSquares:
      return Vec::Ones(r.size());
    case LossKind::Hybrid: {
      const double nu2 = spec.nu * spec.nu;
      return nu2 / (r.array().square() + nu2).pow(1.5);
    }
    case LossKind::StudentT: {
      const auto r2 = r.array().square();
      return 2.0 * (spec.nu - r2) / (spec.nu + r2).square();
    }
  }
  return Vec::Ones(r.size());
}

}  // namespace

Vec loss_hess_diag(const LossSpec& spec, const VecRef& r) { return loss_hess_diag(spec, r, spec.boost); }

Vec loss_hess_diag(const LossSpec& spec, const VecRef& r, double boost) {
  return raw_curvature(spec, r).array() + boost;
}

double min_psd_boost(const LossSpec& spec, const VecRef& r) {
  if (r.size() == 0) return 0.0;
  const double lowest = raw_curvature(spec, r).minCoeff();
  return std::max(0.0, kPsdFloor - lowest);
}

Vec safeguarded_hess_diag(const LossSpec& spec, const VecRef& r, bool* boosted) {
  const double needed = min_psd_boost(spec, r);
  const bool raise = needed > spec.boost;
  if (boosted != nullptr) *boosted = raise;
  return loss_hess_diag(spec, r, raise ? needed : spec.boost);
}

}  // namespace ssmfit
