#pragma once

#include <stdexcept>

namespace convattn {

/// Malformed or unsupported file content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration key or value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent corpus data (manifest, vocabulary, transcripts).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace convattn
