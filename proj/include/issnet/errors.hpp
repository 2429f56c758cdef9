#pragma once

#include <stdexcept>
#include <string>

namespace issnet {

// Error families. The CLI maps these onto exit codes (see tools/issnet.cpp).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents, groupings or layer shapes do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value left the finite range or an iteration failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller supplied an out-of-domain argument (non-positive step, bad factor, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition relating several inputs was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (IDX, checkpoint, log line, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Network surgery (layer removal, growth) cannot be carried out on this topology.
class StructuralError : public Error {
 public:
  using Error::Error;
};

}  // namespace issnet
