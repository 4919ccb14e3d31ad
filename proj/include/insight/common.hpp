#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace insight {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error taxonomy. The CLI maps each family onto its own exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration (exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Missing, truncated, or shape-inconsistent input data (exit code 3).
class DataError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or a numerically degenerate computation (exit code 4).
class NumericError : public Error {
public:
    using Error::Error;
};

// Warnings go to stderr unless silenced (tests silence them).
void log_warning(const std::string& message);
void set_warnings_enabled(bool enabled);
std::size_t warning_count();

} // namespace insight
