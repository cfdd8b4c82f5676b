#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evd {

/// Malformed text input; line is 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  [[nodiscard]] std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class FormatErrc {
  bad_magic = 1,
  truncated = 2,
  count_mismatch = 3,
  unsorted = 4,
  bad_record = 5,
  bad_header = 6,
};

inline const char* to_string(FormatErrc c) {
  switch (c) {
    case FormatErrc::bad_magic: return "bad magic";
    case FormatErrc::truncated: return "truncated payload";
    case FormatErrc::count_mismatch: return "count mismatch";
    case FormatErrc::unsorted: return "timestamps not sorted";
    case FormatErrc::bad_record: return "invalid record";
    case FormatErrc::bad_header: return "invalid header";
  }
  return "unknown";
}

/// Binary container violations (EVS1, tensor containers, checkpoints).
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  [[nodiscard]] FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

/// Invalid or inconsistent configuration, raised before any work starts.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evd
