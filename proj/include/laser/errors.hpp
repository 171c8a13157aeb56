// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace laser {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An input lies outside the domain of an elementwise function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A softmax row has no unmasked entry, or a weighted row sums to zero.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation does not hold.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, training or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad user data (tokens out of vocabulary, unreadable corpus, malformed CSV).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Training hit a non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint could not be read or does not match the model configuration.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace laser
