// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

#ifndef GTRACE_ERROR_HPP
#define GTRACE_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace gtrace {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string &what) : std::runtime_error(what) {}
};

/// Bad argument or precondition violation (mismatched sizes, out-of-range index, ...).
class InvalidArgument : public Error {
  public:
    using Error::Error;
};

/// A field failed validation while loading a file. `path` names the field, e.g. "gaussians[3].scale".
class ValidationError : public Error {
  public:
    ValidationError(std::string path, const std::string &message)
        : Error(path + ": " + message), path_(std::move(path)) {}

    const std::string &path() const noexcept { return path_; }

  private:
    std::string path_;
};

/// Malformed byte stream. `offset` is the byte position where parsing stopped.
class ParseError : public Error {
  public:
    ParseError(std::size_t offset, const std::string &message)
        : Error("parse error at byte " + std::to_string(offset) + ": " + message), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

  private:
    std::size_t offset_;
};

/// Error raised while processing one view; carries the view index.
class ViewError : public Error {
  public:
    ViewError(std::size_t view, const std::string &message)
        : Error("view " + std::to_string(view) + ": " + message), view_(view) {}

    std::size_t view() const noexcept { return view_; }

  private:
    std::size_t view_;
};

namespace detail {
inline void require(bool cond, const std::string &message) {
    if (!cond)
        throw InvalidArgument(message);
}
} // namespace detail

} // namespace gtrace

#endif // GTRACE_ERROR_HPP
