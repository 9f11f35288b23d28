#pragma once

#include <stdexcept>
#include <string>

namespace confmoe {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Shapes or lengths that do not line up.
class DimensionError : public Error {
   public:
    using Error::Error;
};

// Invalid hyperparameters or configuration (K > N, tau <= 0, unknown keys...).
class ConfigError : public Error {
   public:
    using Error::Error;
};

// Input outside an operation's mathematical domain.
class DomainError : public Error {
   public:
    using Error::Error;
};

class ImputationError : public Error {
   public:
    using Error::Error;
};

// A metric that is undefined for the given data (zero totals, no positives...).
class MetricError : public Error {
   public:
    using Error::Error;
};

// Finite-difference oracle failures.
class OracleError : public Error {
   public:
    using Error::Error;
};

// Non-finite losses or parameters during training.
class NumericalError : public Error {
   public:
    using Error::Error;
};

}  // namespace confmoe
