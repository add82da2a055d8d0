#pragma once

#include <stdexcept>
#include <string>

namespace filmseg {

// Every failure raised by the library derives from Error. The CLI maps the
// two families onto exit codes: checks/validation -> 1, configuration -> 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

// Shape or extent disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid data (non-binary mask, non-one-hot vector, empty ROI, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

class VocabularyError : public Error {
public:
    using Error::Error;
};

// Malformed file on disk: bad magic, truncation, unknown names.
class FormatError : public Error {
public:
    using Error::Error;
};

class CalibrationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

// API misuse: calling an operation outside its precondition.
class UsageError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

} // namespace filmseg
