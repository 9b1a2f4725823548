// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace incubator {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class LabelError : public Error { public: using Error::Error; };
class EmptyInputError : public Error { public: using Error::Error; };
class StaleTapeError : public Error { public: using Error::Error; };
/// A forward op produced NaN or Inf.
class NumericError : public Error { public: using Error::Error; };

class DivisionError : public Error { public: using Error::Error; };
class StitchError : public Error { public: using Error::Error; };
class AssemblyError : public Error { public: using Error::Error; };

/// Training diverged or hit a non-finite gradient.
class TrainingAbort : public Error { public: using Error::Error; };

class FormatError : public Error { public: using Error::Error; };
class CorruptCheckpointError : public FormatError { public: using FormatError::FormatError; };
class SpecHashError : public FormatError { public: using FormatError::FormatError; };
class ParseError : public FormatError { public: using FormatError::FormatError; };
class IoError : public FormatError { public: using FormatError::FormatError; };

class SubsampleError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class SummaryError : public Error { public: using Error::Error; };

}  // namespace incubator
