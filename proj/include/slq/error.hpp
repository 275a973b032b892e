#pragma once

#include <stdexcept>
#include <string>

namespace slq {

// Bad configuration: invalid flag/field values. Message names the failing constraint.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated API precondition: shape mismatch, non-scalar loss, uncommitted prefix, ...
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Numerically invalid input: zero divisor, NaN gradient, non-finite data.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace slq
