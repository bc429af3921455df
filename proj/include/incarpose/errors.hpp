#pragma once

#include <stdexcept>
#include <string>

namespace incarpose {

// Every failure raised by the library derives from Error so callers can
// catch the whole family at once; the subclasses map onto the distinct
// error kinds the API documents.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input is outside the mathematical domain of the operation (non-SO(3)
// matrix, non-unit quaternion, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Input is structurally valid but numerically degenerate (near-zero norm,
// rank-deficient matrix).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

// Raw network output that cannot be mapped to a rotation.
class DegenerateOutput : public DegenerateInput {
 public:
  using DegenerateInput::DegenerateInput;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UndefinedDirection : public Error {
 public:
  using Error::Error;
};

class StaleTape : public Error {
 public:
  using Error::Error;
};

class EmptyOverlap : public Error {
 public:
  using Error::Error;
};

// Malformed files or inconsistent on-disk data.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace incarpose
