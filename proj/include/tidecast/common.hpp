// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace tidecast {

// Error taxonomy. Configuration and shape errors indicate caller bugs or bad
// inputs; the runtime errors indicate failures during an otherwise valid run.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct StabilityError : std::runtime_error {
    explicit StabilityError(const std::string& msg) : std::runtime_error("stability error: " + msg) {}
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error("divergence error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("i/o error: " + msg) {}
};

struct InsufficientDataError : std::runtime_error {
    explicit InsufficientDataError(const std::string& msg)
        : std::runtime_error("insufficient data: " + msg) {}
};

struct TrainingError : std::runtime_error {
    int epoch = -1;
    TrainingError(const std::string& msg, int epoch_index)
        : std::runtime_error("training error (epoch " + std::to_string(epoch_index) + "): " + msg),
          epoch(epoch_index) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

}  // namespace tidecast
