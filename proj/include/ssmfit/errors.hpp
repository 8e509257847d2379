#pragma once

#include <stdexcept>
#include <string>

namespace ssmfit {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// A block pivot of a structured factorization is numerically singular.
class SingularSystem : public Error {
 public:
  using Error::Error;
};

/// The measurement-space Schur complement of the KKT matrix could not be
/// factored, i.e. the saddle system is not invertible at this point.
class SchurSingular : public Error {
 public:
  using Error::Error;
};

class SingularCovariance : public Error {
 public:
  using Error::Error;
};

class MaxIterations : public Error {
 public:
  using Error::Error;
};

class HessianSingular : public Error {
 public:
  using Error::Error;
};

class DualSingular : public Error {
 public:
  using Error::Error;
};

class LineSearchFailure : public Error {
 public:
  using Error::Error;
};

class OracleFailure : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssmfit
