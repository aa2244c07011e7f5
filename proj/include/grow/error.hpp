#pragma once

#include <stdexcept>
#include <string>

namespace grow {

enum class ErrorKind {
    shape,        // tensor/model extent mismatch
    config,       // bad config value or unknown key
    usage,        // bad CLI/spec argument
    numeric,      // non-finite value where finite required
    state,        // operation invalid for current object state
    io,           // filesystem failure
    bad_magic,    // checkpoint: wrong magic bytes
    bad_version,  // checkpoint: unsupported format version
    truncated,    // checkpoint: payload shorter than header claims
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

}  // namespace grow
