#pragma once

#include <stdexcept>
#include <string>

namespace normalforge {

struct InvalidCloud : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateNeighborhood : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegeneratePatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LengthMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroQuaternion : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroVector : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace normalforge
