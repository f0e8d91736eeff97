#pragma once

#include <stdexcept>
#include <string>

namespace hist {

// Error categories map to CLI exit codes: config=2, data=3, numeric=4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/contract violations inside the tensor layer.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : DataError {
    explicit ParseError(const std::string& msg) : DataError(msg) {}
};

}  // namespace hist
