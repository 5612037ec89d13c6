#pragma once

#include <stdexcept>
#include <string>

namespace magicvid {

// File-system and wire-format failures; the CLI maps these to exit code 3.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// NaN/divergence detected mid-computation; the CLI maps these to exit code 4.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace magicvid
