#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace n3d {

// Every failure raised by the library derives from Error and carries a short
// machine-readable tag ("dimension", "format", ...) used by the CLI prefix.
class Error : public std::runtime_error {
 public:
  Error(std::string tag, const std::string& what) : std::runtime_error(what), tag_(std::move(tag)) {}
  const std::string& tag() const noexcept { return tag_; }

 private:
  std::string tag_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error("index", what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error("numerical", what) {}
};

class VocabError : public Error {
 public:
  explicit VocabError(const std::string& what) : Error("vocab", what) {}
};

class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& what) : Error("generation", what) {}
};

class EmptyResultError : public Error {
 public:
  explicit EmptyResultError(const std::string& what) : Error("empty-result", what) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error("format", what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace n3d
