#pragma once

#include <stdexcept>
#include <string>

namespace costdet {

// Bad shapes passed to an autodiff op or a loss.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Misuse of an API contract (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Invalid user-supplied configuration. The CLI maps this to exit code 2.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Dataset / checkpoint I/O failures, including checksum mismatches.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FeatureError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised when training produces a non-finite loss.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EvaluationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace costdet
