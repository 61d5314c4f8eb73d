#pragma once

#include <stdexcept>
#include <string>

namespace dcbm {

/// Dimension mismatch between operands.
class ShapeError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument value.
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Undefined or non-finite numerical result (zero variance, NaN loss, ...).
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Training diverged or could not be completed.
class TrainingError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

} // namespace dcbm
