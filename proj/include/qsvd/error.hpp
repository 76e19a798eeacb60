#pragma once

#include <stdexcept>
#include <string>

namespace qsvd {

// Error kinds map one-to-one onto the CLI exit-code contract.
enum class ErrorKind {
  kFormat,     // exit 2
  kUsage,      // exit 3
  kNumerical,  // exit 4
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const { return kind_; }
  // Short machine-readable identifier, e.g. "checksum_mismatch".
  const std::string& code() const { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

inline Error format_error(std::string code, const std::string& message) {
  return Error(ErrorKind::kFormat, std::move(code), message);
}

inline Error usage_error(std::string code, const std::string& message) {
  return Error(ErrorKind::kUsage, std::move(code), message);
}

inline Error numerical_error(std::string code, const std::string& message) {
  return Error(ErrorKind::kNumerical, std::move(code), message);
}

inline const char* kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kFormat:
      return "format";
    case ErrorKind::kUsage:
      return "usage";
    case ErrorKind::kNumerical:
      return "numerical";
  }
  return "unknown";
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kFormat:
      return 2;
    case ErrorKind::kUsage:
      return 3;
    case ErrorKind::kNumerical:
      return 4;
  }
  return 1;
}

}  // namespace qsvd
