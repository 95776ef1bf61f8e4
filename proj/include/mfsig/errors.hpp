#pragma once

#include <stdexcept>
#include <string>

namespace mfsig {

// Invalid configuration (dimensions, fields, presets). CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed external data (files, paths, grids).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// API misuse caught at runtime (shape mismatch, non-scalar loss, ...).
struct UsageError : std::logic_error {
  explicit UsageError(const std::string& what) : std::logic_error(what) {}
};

// Training failure (NaN gradients, divergence) with stage/step provenance.
struct TrainError : std::runtime_error {
  TrainError(const std::string& what, int stage, long step)
      : std::runtime_error(what + " [stage=" + std::to_string(stage) +
                           " step=" + std::to_string(step) + "]"),
        stage(stage),
        step(step) {}
  int stage = -1;
  long step = -1;
};

// Non-finite state during simulation with full provenance.
struct SimulationError : std::runtime_error {
  SimulationError(const std::string& what, int stage, std::size_t time_index,
                  std::size_t n1, std::size_t n2)
      : std::runtime_error(what + " [stage=" + std::to_string(stage) +
                           " t_index=" + std::to_string(time_index) +
                           " n1=" + std::to_string(n1) +
                           " n2=" + std::to_string(n2) + "]"),
        stage(stage),
        time_index(time_index),
        n1(n1),
        n2(n2) {}
  int stage;
  std::size_t time_index, n1, n2;
};

}  // namespace mfsig
