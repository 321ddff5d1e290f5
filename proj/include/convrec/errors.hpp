#ifndef CONVREC_ERRORS_HPP_
#define CONVREC_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace convrec {

// Error categories mirror the CLI exit codes: usage (1), data (2), numeric (3).
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct usage_error : error {
  using error::error;
};

struct data_error : error {
  using error::error;
};

struct numeric_error : error {
  using error::error;
};

}  // namespace convrec

#endif  // CONVREC_ERRORS_HPP_
