#ifndef WBC_ERRORS_HPP_
#define WBC_ERRORS_HPP_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace wbc {

/// Root of every exception thrown by the toolkit.
class Error : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

/// A caller broke a precondition (e.g. mixed coordinate frames).
class ContractError : public Error { using Error::Error; };

/// Input data was rejected (bad box, out-of-bounds, non-positive dims).
class InputError : public Error { using Error::Error; };

class GeometryError : public InputError { using InputError::InputError; };

class ConfigError : public Error { using Error::Error; };

/// Tensor dimensions disagree with the head configuration.
class ShapeError : public Error { using Error::Error; };

class DecodeError : public Error { using Error::Error; };

/// Value outside the domain of an inverse function (logit of 0 or 1, log of 0).
class DomainError : public Error { using Error::Error; };

class InsufficientDataError : public InputError { using InputError::InputError; };

class SamplingError : public Error { using Error::Error; };

class IoError : public Error { using Error::Error; };

class SchemaError : public Error { using Error::Error; };

/// Report construction failed because a class row is missing.
class StructuralError : public Error { using Error::Error; };

class ParseError : public Error {
 public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_{offset} {}

    std::size_t offset() const noexcept { return offset_; }

 private:
    std::size_t offset_;
};

class TensorFileError : public Error { using Error::Error; };
class BadMagicError : public TensorFileError { using TensorFileError::TensorFileError; };
class UnsupportedVersionError : public TensorFileError { using TensorFileError::TensorFileError; };
class EndiannessError : public TensorFileError { using TensorFileError::TensorFileError; };
class LengthError : public TensorFileError { using TensorFileError::TensorFileError; };
class CrcError : public TensorFileError { using TensorFileError::TensorFileError; };

}  // namespace wbc

#endif  // WBC_ERRORS_HPP_
