#pragma once

#include <stdexcept>
#include <string>

namespace modiad {

// Invalid configuration value (bad budget, rank too large, gamma out of range, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Rejected input: dimension mismatch, empty sample list, architecture mismatch.
struct InvalidInputError : std::runtime_error {
    explicit InvalidInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite loss or gradient.
struct DivergedError : std::runtime_error {
    DivergedError(const std::string& msg, long step) : std::runtime_error(msg), step(step) {}
    long step = -1;
};

// Metric inputs contain only one label value (AUROC/AUPRO undefined).
struct DegenerateLabelsError : std::runtime_error {
    explicit DegenerateLabelsError(const std::string& msg) : std::runtime_error(msg) {}
};

// Snapshot stream is truncated or structurally inconsistent.
struct CorruptStreamError : std::runtime_error {
    explicit CorruptStreamError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace modiad
