#pragma once

#include <stdexcept>
#include <string>

namespace ace {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map the whole family onto one exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents disagree (matmul inner dims, mask length, head input side).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside the domain of an op: log(0), NaN/Inf, loss not on the tape.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Overlap mask selects nothing.
class EmptyOverlapError : public DomainError {
 public:
  using DomainError::DomainError;
};

// Hyper-parameter or argument out of its legal range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Crop rectangles outside the image or crops not nested.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Crop anchors not on the 2-patch lattice.
class AlignmentError : public GeometryError {
 public:
  using GeometryError::GeometryError;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data (PGM, checkpoint, manifest, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ace
