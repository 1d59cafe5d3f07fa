#pragma once

#include <stdexcept>
#include <string>

namespace wpl {

// Thrown on malformed run configs (CLI exit 2).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// Thrown on filesystem failures (CLI exit 3).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

// Thrown when a required checkpoint/dataset is absent (CLI exit 4).
struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& m) : std::runtime_error(m) {}
};

// Thrown on NaN/Inf aborts during training or sampling (CLI exit 5).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

} // namespace wpl
