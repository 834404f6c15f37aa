#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cfproto {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file (CSV, schema, model or embedding document).
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t row, std::string column)
        : Error(what + " (row " + std::to_string(row) + ", column " + column + ")"),
          row_(row), column_(std::move(column)) {}

    explicit ParseError(const std::string& what) : Error(what) {}

    std::size_t row() const noexcept { return row_; }
    const std::string& column() const noexcept { return column_; }

private:
    std::size_t row_ = 0;
    std::string column_;
};

/// Input dimension does not match the model or index it is applied to.
class DimensionError : public Error {
public:
    DimensionError(const std::string& where, std::size_t expected, std::size_t got)
        : Error(where + ": expected dimension " + std::to_string(expected) + ", got " +
                std::to_string(got)) {}
};

/// Communication with an external model process failed.
class TransportError : public Error {
public:
    using Error::Error;
};

/// A model returned output that violates the predictor contract.
class ContractError : public Error {
public:
    using Error::Error;
};

}  // namespace cfproto
