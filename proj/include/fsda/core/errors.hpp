#pragma once

#include <stdexcept>
#include <string>

namespace fsda {

/// Invalid configuration (bad field values, impossible sizes).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A required input (dataset directory, file) is absent.
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A required upstream artifact (checkpoint, corpus) is absent.
struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training diverged; the message carries diagnostics.
struct TrainingFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check_cfg(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace fsda
