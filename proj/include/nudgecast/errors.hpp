#pragma once

#include <stdexcept>
#include <string>

namespace nudgecast {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad user input: malformed files, invalid parameters, violated preconditions.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A holdout study was about to be written into training data.
class ContaminationError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Provider or system failure (network, I/O, exhausted retries).
class BackendError : public Error {
public:
    explicit BackendError(const std::string& what, int status = 0)
        : Error(what), status_(status) {}

    /// HTTP status when the failure came from a provider response, else 0.
    int status() const noexcept { return status_; }

private:
    int status_;
};

class NotFoundError : public BackendError {
public:
    explicit NotFoundError(const std::string& what) : BackendError(what, 404) {}
};

}  // namespace nudgecast
