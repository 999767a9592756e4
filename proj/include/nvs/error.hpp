#pragma once

#include <stdexcept>
#include <string>

namespace nvs {

/// Base of all errors raised by the library. The category decides the
/// process exit code used by the command-line tool.
class Error : public std::runtime_error {
 public:
  enum class Category { config, data, numeric };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

/// Operand shapes that do not fit together.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(Category::data, what) {}
};

/// Invalid camera, pose or geometric configuration.
class GeometryError : public Error {
 public:
  explicit GeometryError(const std::string& what) : Error(Category::data, what) {}
};

/// Malformed or missing input data (files, datasets, images).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Category::data, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Category::config, what) {}
};

/// NaN/Inf or an arithmetic domain violation.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(Category::numeric, what) {}
};

}  // namespace nvs
