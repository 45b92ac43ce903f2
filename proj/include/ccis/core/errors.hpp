#pragma once

#include <stdexcept>
#include <string>

namespace ccis {

// Exit-code contract used by the CLI: 0 ok, 2 config, 3 io, 4 numeric.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& m) : std::runtime_error(m) {}
};

struct PlacementError : std::runtime_error {
    explicit PlacementError(const std::string& m) : std::runtime_error(m) {}
};

struct RetriableError : std::runtime_error {
    int attempts;
    RetriableError(const std::string& m, int n) : std::runtime_error(m), attempts(n) {}
};

}  // namespace ccis
