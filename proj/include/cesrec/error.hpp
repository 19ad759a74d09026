#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cesrec {

enum class ErrorCode {
  invalid_argument,
  io,
  format,
  not_found,
  numeric,
  backend,
  conflict,
};

const char* to_string(ErrorCode code);

// Every failure surfaced by the library. `details` carries structured extras
// such as offending item ids so callers (CLI, HTTP layer) can report them.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::vector<std::string> details = {})
      : std::runtime_error(message), code_(code), details_(std::move(details)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::vector<std::string>& details() const noexcept { return details_; }

 private:
  ErrorCode code_;
  std::vector<std::string> details_;
};

}  // namespace cesrec
