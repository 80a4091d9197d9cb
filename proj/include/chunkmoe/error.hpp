// Copyright (c) 2026 the chunkmoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace chunkmoe {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A caller violated a documented precondition (shape mismatch, bad argument).
struct ContractError : Error {
  using Error::Error;
};

/// An invalid configuration value or unknown config key.
struct ConfigError : Error {
  using Error::Error;
};

/// Filesystem / serialization failure.
struct IoError : Error {
  using Error::Error;
};

/// A numeric primitive produced NaN/Inf.
struct NumericError : Error {
  using Error::Error;
};

inline void check_contract(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

inline void check_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace chunkmoe
