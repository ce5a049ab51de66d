// SPDX-License-Identifier: Apache-2.0
#ifndef FOPA_ERROR_HPP
#define FOPA_ERROR_HPP

#include <stdexcept>
#include <string>

namespace fopa {

/// Coarse classification of failures, shared with the C API error codes.
enum class ErrorKind {
  kDimension = 1,
  kContract,
  kInput,
  kParse,
  kData,
  kConfig,
  kTransfer,
  kTraining,
  kNumeric,
  kCounting,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string &what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define FOPA_DEFINE_ERROR(Name, Kind)                                        \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string &what) : Error(ErrorKind::Kind, what) {} \
  };

FOPA_DEFINE_ERROR(DimensionError, kDimension)
FOPA_DEFINE_ERROR(ContractError, kContract)
FOPA_DEFINE_ERROR(InputError, kInput)
FOPA_DEFINE_ERROR(DataError, kData)
FOPA_DEFINE_ERROR(ConfigError, kConfig)
FOPA_DEFINE_ERROR(TransferError, kTransfer)
FOPA_DEFINE_ERROR(TrainingError, kTraining)
FOPA_DEFINE_ERROR(NumericError, kNumeric)
FOPA_DEFINE_ERROR(CountingError, kCounting)
FOPA_DEFINE_ERROR(IoError, kIo)

#undef FOPA_DEFINE_ERROR

/// Malformed file content; carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string &what, std::size_t offset)
      : Error(ErrorKind::kParse,
              what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fopa

#endif  // FOPA_ERROR_HPP
