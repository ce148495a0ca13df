#pragma once

#include <stdexcept>
#include <string>

namespace tmgf {

/// Invalid or inconsistent configuration (shapes, ranges, missing keys).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Caller passed data that violates an operation's precondition.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite activations or a degenerate normalization.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Pseudo-labeling failed, e.g. every image came out as an outlier.
struct LabelingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed text input. Carries the 1-based line number when known.
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, long line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

}  // namespace tmgf
