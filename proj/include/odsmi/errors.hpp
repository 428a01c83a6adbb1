#ifndef ODSMI_ERRORS_HPP
#define ODSMI_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace odsmi {

// Base for every error raised by the library. Callers that only care about
// "something in odsmi failed" catch this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad argument or model/schema specification (maps to CLI exit code 2).
class SpecError : public Error {
public:
    using Error::Error;
};

// Input outside the mathematical domain of a function (e.g. NaN).
class DomainError : public Error {
public:
    using Error::Error;
};

// A matrix that had to be positive definite was not.
class FactorizationError : public Error {
public:
    using Error::Error;
};

// Rank-deficient design or information matrix.
class RankError : public Error {
public:
    using Error::Error;
};

// Logistic fit whose likelihood has no finite maximizer.
class SeparationError : public Error {
public:
    using Error::Error;
};

// Iterative procedure that did not reach its tolerance.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

// Sampling design that is inconsistent or cannot be realized.
class DesignError : public Error {
public:
    using Error::Error;
};

} // namespace odsmi

#endif
