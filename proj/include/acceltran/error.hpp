#pragma once

#include <stdexcept>

namespace acceltran {

/// Invalid model, hardware, energy, or option configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor/tile shapes that do not conform for the requested operation.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The simulation engine can make no further progress, or hit its cycle cap.
class DeadlockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace acceltran
