#pragma once

#include <stdexcept>
#include <string>

namespace nlb {

inline constexpr const char* kVersion = "0.1.0";

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Linear algebra / shape errors.
struct DimensionMismatch : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct NotPositiveDefinite : Error { using Error::Error; };

// Optimization / sampling errors.
struct NonFiniteObjective : Error { using Error::Error; };
struct StuckChain : Error { using Error::Error; };

// Data / configuration errors.
struct ParseError : Error { using Error::Error; };
struct MissingValue : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// Evaluation errors.
struct PairingError : Error { using Error::Error; };
struct SchemaMismatch : Error { using Error::Error; };
struct UnsupportedK : Error { using Error::Error; };

}  // namespace nlb
