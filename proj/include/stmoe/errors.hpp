#pragma once

#include <stdexcept>
#include <string>

namespace stmoe {

// Each category maps onto a CLI exit code: config 2, data 3, numerical 4.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stmoe
