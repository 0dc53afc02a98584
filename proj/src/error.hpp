#pragma once

#include <stdexcept>
#include <string>

namespace mmsim {

// Mirrors mmsim_status in the public C header; CLI exit codes use the same values.
enum class Status : int {
  Ok = 0,
  Invalid = 1,
  Io = 2,
  Parse = 3,
  Shape = 4,
  Numeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(Status status, const std::string& message)
      : std::runtime_error(message), status_(status) {}

  Status status() const noexcept { return status_; }

 private:
  Status status_;
};

[[noreturn]] inline void fail(Status s, const std::string& msg) { throw Error(s, msg); }

}  // namespace mmsim
