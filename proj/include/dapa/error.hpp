#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

namespace dapa {

// Error classes are grouped by how the CLI reports them: configuration
// problems exit with 2, data problems with 3, broken invariants with 4.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint or file was written for a different model configuration.
class ConfigMismatchError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public DataError {
 public:
  using DataError::DataError;
};

/// Malformed file: bad magic, truncation, unsupported version.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class IndexError : public DataError {
 public:
  using DataError::DataError;
};

class LengthError : public DataError {
 public:
  using DataError::DataError;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public InvariantError {
 public:
  using InvariantError::InvariantError;
};

class UsageError : public InvariantError {
 public:
  using InvariantError::InvariantError;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return 3;
  return 4;
}

/// Rethrows the active exception as the same error class with `context`
/// prepended. Only valid inside a catch block.
[[noreturn]] inline void rethrow_with_context(const std::string& context) {
  try {
    throw;
  } catch (const ConfigMismatchError& e) {
    throw ConfigMismatchError(context + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const DegenerateInputError& e) {
    throw DegenerateInputError(context + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(context + ": " + e.what());
  } catch (const IndexError& e) {
    throw IndexError(context + ": " + e.what());
  } catch (const LengthError& e) {
    throw LengthError(context + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(context + ": " + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(context + ": " + e.what());
  } catch (const UsageError& e) {
    throw UsageError(context + ": " + e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    throw DataError(context + ": " + e.what());
  } catch (const std::exception& e) {
    throw InvariantError(context + ": " + e.what());
  }
}

}  // namespace dapa
