#pragma once

#include <stdexcept>
#include <string>

namespace facepaint {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

// The face parser found no facial region in the image.
class NoFaceDetected : public Error {
public:
    using Error::Error;
};

class DemakeupUnavailable : public Error {
public:
    using Error::Error;
};

class NonFiniteValue : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class VersionMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace facepaint
