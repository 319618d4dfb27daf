#pragma once

#include <stdexcept>
#include <string>

namespace ddae {

// Error categories map one-to-one onto the C API status codes and CLI exit codes.
enum class ErrorKind {
  parameter,  // invalid configuration or argument
  contract,   // precondition violated by the caller (shapes, ranges)
  numerical,  // non-finite state or degenerate math
  data,       // malformed dataset or file contents
  io,         // filesystem failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ParameterError : Error {
  explicit ParameterError(const std::string& w) : Error(ErrorKind::parameter, w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error(ErrorKind::contract, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::numerical, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::data, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::io, w) {}
};

}  // namespace ddae
