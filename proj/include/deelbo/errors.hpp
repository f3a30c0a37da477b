#pragma once

#include <stdexcept>

namespace deelbo {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dimension or shape mismatch between operands.
struct ShapeError : Error {
  using Error::Error;
};

/// A covariance violates its positivity/validity requirements.
struct InvalidCovariance : Error {
  using Error::Error;
};

/// Numerical degeneracy: failed factorization or non-finite intermediate.
struct NumericalError : Error {
  using Error::Error;
};

/// A hyperparameter outside its valid domain.
struct InvalidHyperparam : Error {
  using Error::Error;
};

/// Bad run or experiment configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed input file.
struct ParseError : Error {
  using Error::Error;
};

/// A class-stratified split cannot be formed.
struct StratificationError : Error {
  using Error::Error;
};

/// Training aborted on a non-finite objective.
struct DivergenceError : Error {
  using Error::Error;
};

/// Argument outside its allowed range.
struct RangeError : Error {
  using Error::Error;
};

}  // namespace deelbo
