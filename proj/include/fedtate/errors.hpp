#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedtate {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset/schema/config problems; CLI exit code 2.
struct ValidationError : Error {
  using Error::Error;
};

// Model fitting failures (degenerate response, singular design, arm too small).
struct FitError : Error {
  using Error::Error;
};

// Density-ratio solve failures; carries the last residual sup-norm.
struct TiltError : Error {
  TiltError(const std::string& msg, double residual)
      : Error(msg), residual_norm(residual) {}
  double residual_norm;
};

// Wire-format problems; CLI exit code 3.
struct ProtocolError : Error {
  explicit ProtocolError(const std::string& msg, std::size_t offset = 0)
      : Error(msg), byte_offset(offset) {}
  std::size_t byte_offset;
};

struct SingularMatrixError : Error {
  using Error::Error;
};

}  // namespace fedtate
