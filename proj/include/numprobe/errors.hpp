#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace numprobe {

// Coarse failure classes; the CLI maps them onto process exit codes.
enum class ErrorClass { config, input, numeric, report };

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
    ErrorClass error_class() const noexcept { return cls_; }

private:
    ErrorClass cls_;
};

#define NUMPROBE_DEFINE_ERROR(Name, Class)                                           \
    class Name : public Error {                                                      \
    public:                                                                          \
        explicit Name(const std::string& what) : Error(ErrorClass::Class, what) {}  \
    };

NUMPROBE_DEFINE_ERROR(ConfigError, config)
NUMPROBE_DEFINE_ERROR(RangeError, config)
NUMPROBE_DEFINE_ERROR(SplitError, config)
NUMPROBE_DEFINE_ERROR(AlignmentError, config)
NUMPROBE_DEFINE_ERROR(TokenError, input)
NUMPROBE_DEFINE_ERROR(StoreError, input)
NUMPROBE_DEFINE_ERROR(SchemaError, input)
NUMPROBE_DEFINE_ERROR(DimensionError, numeric)
NUMPROBE_DEFINE_ERROR(DegenerateError, numeric)
NUMPROBE_DEFINE_ERROR(ReportError, report)

#undef NUMPROBE_DEFINE_ERROR

// Truncated payload or bad magic; carries the offending file and byte offset.
class CorruptError : public Error {
public:
    CorruptError(const std::string& file, std::size_t offset, const std::string& detail)
        : Error(ErrorClass::input,
                file + ": corrupt at byte " + std::to_string(offset) + ": " + detail),
          file_(file),
          offset_(offset) {}

    const std::string& file() const noexcept { return file_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::string file_;
    std::size_t offset_;
};

class DivergenceError : public Error {
public:
    DivergenceError(std::size_t epoch, const std::string& detail)
        : Error(ErrorClass::numeric,
                "non-finite loss at epoch " + std::to_string(epoch) + ": " + detail),
          epoch_(epoch) {}

    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

}  // namespace numprobe
