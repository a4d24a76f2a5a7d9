// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace flocora {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents that do not agree with what an operation requires.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid model, policy, or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk input (dataset batches, partition files).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A dataset file or directory that does not exist.
class MissingDataError : public Error {
public:
    using Error::Error;
};

/// Client and server disagree on the exchanged tensor set.
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Serialized bytes that do not match their declared layout.
class IntegrityError : public Error {
public:
    using Error::Error;
};

}  // namespace flocora
