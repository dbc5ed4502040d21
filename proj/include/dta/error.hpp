// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dta {

/// Base class for every error raised by the library. `kind()` is the
/// machine-readable tag the CLI emits on stderr.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

// Precondition or shape-rule violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "contract_violation"; }
};

// NaN/Inf produced by a computation.
class NumericError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "numeric"; }
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int epoch, int step)
        : Error(what), epoch_(epoch), step_(step) {}
    const char* kind() const noexcept override { return "training_divergence"; }
    int epoch() const noexcept { return epoch_; }
    int step() const noexcept { return step_; }

private:
    int epoch_;
    int step_;
};

class CorruptionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "corruption"; }
};

class VersionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "version"; }
};

class UsageError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "usage"; }
};

} // namespace dta
