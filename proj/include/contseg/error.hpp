// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace contseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched or invalid array extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied values violate an operation's preconditions.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Configuration documents and run settings (maps to CLI exit code 3).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An update was attempted on a frozen encoder.
class FrozenError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace contseg
