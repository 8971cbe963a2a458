#pragma once

#include <stdexcept>
#include <string>

namespace differ {

// Bad user input: config, labels, shapes. The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Runtime failure: I/O, network, corrupt files. The CLI maps this to exit code 1.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace differ
