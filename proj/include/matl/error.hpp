#pragma once

#include <stdexcept>
#include <string>

namespace matl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or axis mismatch between tensors/operands.
struct DimensionError : Error {
  using Error::Error;
};

// Caller violated an operation precondition (bad argument, wrong mode, ...).
struct UsageError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration (model, experiment, run file).
struct ConfigError : Error {
  using Error::Error;
};

// Bad input data: malformed manifests, invalid annotations, out-of-bounds boxes.
struct DataError : Error {
  using Error::Error;
};

// Filesystem failures: unreadable/unwritable files or directories.
struct IoError : Error {
  using Error::Error;
};

// Training-time failures: non-finite losses or gradients, divergence.
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace matl
