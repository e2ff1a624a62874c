#pragma once

#include <stdexcept>
#include <string>

namespace pseg {

// Error taxonomy shared across the library. The CLI maps these to exit codes:
// UsageError/ConfigError -> 1, DataError -> 2, NumericError -> 3.

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EmptyMaskError : DataError {
    explicit EmptyMaskError(const std::string& msg) : DataError(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace pseg
