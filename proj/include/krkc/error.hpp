#pragma once

#include <stdexcept>

namespace krkc {

// Raised for contract violations: bad shapes, non-finite values, invalid configs.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace krkc
