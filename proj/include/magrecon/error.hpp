#pragma once

#include <stdexcept>
#include <string>

namespace magrecon {

/// Broad failure classes. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
    InvalidArgument,  // bad parameters handed to a library call
    Geometry,         // grids that cannot produce a well-posed operator
    Mismatch,         // data defined on the wrong grid / wrong size
    Numerical,        // singular evaluation, failed iteration
    Config,           // missing or malformed configuration
    Schema,           // file layout not what we expect
    Checksum,         // file content does not match its recorded digest
    Io,               // filesystem failure
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace magrecon
