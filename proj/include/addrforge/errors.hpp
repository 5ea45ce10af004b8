#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

namespace addrforge {

/// Base for every error the forge raises on bad input or environment.
class ForgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or semantically invalid input data. `line` is 1-based, 0 when
/// the error is not tied to a line.
class InputError : public ForgeError {
 public:
  explicit InputError(const std::string& what, std::size_t line = 0)
      : ForgeError(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Filesystem or codec failure on a concrete path.
class IoError : public ForgeError {
 public:
  IoError(const std::filesystem::path& path, const std::string& what)
      : ForgeError(path.string() + ": " + what), path_(path) {}

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace addrforge
