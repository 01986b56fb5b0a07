#pragma once

#include <stdexcept>
#include <string>

namespace mvperm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data violates a structural invariant (shape, PSD, counts, schema).
class DataError : public Error {
 public:
  using Error::Error;
};

/// The moment estimator needs every outcome observed in every study.
class IncompleteDataError : public DataError {
 public:
  IncompleteDataError()
      : DataError("moment estimator is undefined for datasets with missing outcomes") {}
};

/// An iterative fit stopped at its iteration limit.
class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& what, int iterations)
      : Error(what), iterations_(iterations) {}
  int iterations() const noexcept { return iterations_; }

 private:
  int iterations_;
};

class SingularInformationError : public Error {
 public:
  using Error::Error;
};

/// Schur complement of the information is (numerically) zero: the tested
/// component carries no information.
class DegenerateInformationError : public Error {
 public:
  using Error::Error;
};

}  // namespace mvperm
