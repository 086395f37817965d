#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace quantstat {

/// Base class for all quantstat errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Empty histogram or empty view list where at least one observation is required.
class EmptyDataError : public Error {
public:
    using Error::Error;
};

/// Fewer than two active members; the member-level variance is undefined.
class InsufficientMembersError : public Error {
public:
    using Error::Error;
};

/// Moment sums describe a degenerate configuration (e.g. no views at or below
/// the quantile threshold).
class DegenerateDataError : public Error {
public:
    using Error::Error;
};

/// Two-sample comparison with zero standard error but a nonzero delta.
class DegenerateVarianceError : public Error {
public:
    using Error::Error;
};

/// A pipeline phase received inconsistent inputs (e.g. a populated cell with
/// no quantile threshold from the previous phase).
class PipelinePhaseError : public Error {
public:
    using Error::Error;
};

/// Invalid run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Input file failed to parse. Carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : Error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// A member appears in two different variants of the same experiment segment.
class ConflictingExposureError : public Error {
public:
    using Error::Error;
};

} // namespace quantstat
