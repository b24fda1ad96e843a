#pragma once

#include <stdexcept>
#include <string>

namespace fediptw {

// All library failures derive from Error so callers can catch one type and
// still branch on the category when they care.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimension or shape disagreement between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or numerically singular systems.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid user configuration (bad method name, too few records per fold, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed external data (CSV ingestion).
class IngestError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. a backward pass fed with a stale forward cache.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace fediptw
