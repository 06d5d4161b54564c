#pragma once

#include <stdexcept>
#include <string>

namespace gfslt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/sequence dimensions do not line up.
struct ShapeError : Error {
  using Error::Error;
};

// A block or pipeline was wired with inconsistent settings.
struct ConfigError : Error {
  using Error::Error;
};

// Input values outside the mathematical domain of an operation
// (zero-norm embeddings, empty pools, non-rotation blocks, ...).
struct ValueError : Error {
  using Error::Error;
};

// Unknown id in a fixed table (gesture vocabulary, token map).
struct LookupError : Error {
  using Error::Error;
};

// Reading a dataset or checkpoint from disk failed.
struct IoError : Error {
  using Error::Error;
};

// A describer backend gave up after exhausting its retry budget.
struct BackendError : Error {
  int segment_index = -1;
  BackendError(const std::string& msg, int segment)
      : Error(msg), segment_index(segment) {}
};

// A loss turned NaN/Inf during optimization; message names the component.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace gfslt
