#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ctrsink {

// Base for every error the library raises on a broken contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// softmax over a row whose entries are all masked out
class DegenerateRowError : public Error {
 public:
  explicit DegenerateRowError(std::size_t row)
      : Error("softmax_rows: row " + std::to_string(row) + " is fully masked"),
        row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Dataset line could not be parsed as a record.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Record parsed but a required field is missing or has the wrong type.
class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// AUC requested on labels of a single class.
class SingleClassError : public Error {
 public:
  SingleClassError() : Error("auc: labels contain a single class") {}
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctrsink
