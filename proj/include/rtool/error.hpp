#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rtool {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input row; carries the 1-based line number of the offending row.
class ParseError : public Error {
 public:
  ParseError(std::string file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what),
        file_(std::move(file)),
        line_(line) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

/// Missing or unexpected columns in a tabular input.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Subword tokens or trees that cannot be placed onto corpus words.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// Bad arguments or inputs detected before any computation starts.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage failed; names the stage and keeps the underlying message.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& cause)
      : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

class RankDeficientError : public Error {
 public:
  explicit RankDeficientError(std::vector<std::string> columns)
      : Error(describe(columns)), columns_(std::move(columns)) {}

  const std::vector<std::string>& columns() const noexcept { return columns_; }

 private:
  static std::string describe(const std::vector<std::string>& columns) {
    std::string msg = "fixed-effects design is rank deficient; collinear columns:";
    for (const auto& c : columns) msg += " " + c;
    return msg;
  }

  std::vector<std::string> columns_;
};

}  // namespace rtool
