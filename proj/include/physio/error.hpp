#pragma once

#include <stdexcept>
#include <string>

namespace physio {

/// Failure categories. The CLI maps each onto a process exit code.
enum class ErrorKind {
  usage,          // 64
  data,           // 1
  hash_mismatch,  // 2
  numeric,        // 3
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) {
  throw Error(ErrorKind::data, what);
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
      return 64;
    case ErrorKind::data:
      return 1;
    case ErrorKind::hash_mismatch:
      return 2;
    case ErrorKind::numeric:
      return 3;
  }
  return 1;
}

}  // namespace physio
