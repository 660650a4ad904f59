#pragma once

#include <stdexcept>
#include <string>

namespace hiflow {

// Error taxonomy. The CLI maps these onto process exit codes:
//   ConfigError -> 2, DataError -> 3, NumericError -> 4.
// DimensionError is a ConfigError: a shape mismatch is always a wiring or
// configuration fault, never a data-dependent runtime condition.

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DimensionError : public ConfigError {
public:
    explicit DimensionError(const std::string& msg) : ConfigError(msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hiflow
