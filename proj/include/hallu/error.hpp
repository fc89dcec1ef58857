#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace hallu {

/// Base class for every hard failure raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or incomplete configuration. Maps to CLI exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage could not complete. Maps to CLI exit code 3.
class StageError : public Error {
public:
    using Error::Error;
};

/// Network or endpoint failure while talking to a chat-completion backend.
class TransportError : public Error {
public:
    using Error::Error;
};

/// A record-level problem that does not abort the surrounding stream.
struct Diagnostic {
    std::string where;
    std::string message;
};

using Diagnostics = std::vector<Diagnostic>;

}  // namespace hallu
