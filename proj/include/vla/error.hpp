#pragma once

#include <stdexcept>
#include <string>

namespace vla {

// Error taxonomy. Everything derives from std::runtime_error so callers can
// catch broadly; tests catch the specific type.

// Tensor shape disagreement (names both shapes in the message).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A documented precondition was violated (non-scalar loss, frozen parameter
// handed to an optimizer, t outside [0,1], ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file on disk; message carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Word not present in the closed vocabulary; message names the word.
struct VocabError : std::runtime_error {
    explicit VocabError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration value (indivisible image dims, unknown config key, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Scene generation could not satisfy placement constraints.
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A training run failed to reach a required target (reported, never silent).
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vla
