// SPDX-License-Identifier: Apache-2.0
/**
 * @file   common.hpp
 * @brief  Scalar type selection, namespace macros and the error hierarchy.
 *
 * The library is built twice: the default float32 build and a float64
 * verification build (QATIE_REAL_DOUBLE) used by the gradient checker. Each
 * build lives in its own inline namespace so both can be linked into one
 * executable.
 */
#pragma once

#include <stdexcept>
#include <string>

#ifdef QATIE_REAL_DOUBLE
#define QATIE_PRECISION_NS f64
#else
#define QATIE_PRECISION_NS f32
#endif

#define QATIE_BEGIN_NAMESPACE                                                  \
  namespace qatie {                                                            \
  inline namespace QATIE_PRECISION_NS {
#define QATIE_END_NAMESPACE                                                    \
  }                                                                            \
  }

namespace qatie {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel arithmetic do not line up.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Missing files, empty datasets, invalid configuration values.
class DataError : public Error {
public:
  using Error::Error;
};

/// Malformed PNG stream or checkpoint container.
class FormatError : public Error {
public:
  using Error::Error;
};

/// Non-finite losses and failed numeric checks.
class NumericError : public Error {
public:
  using Error::Error;
};

} // namespace qatie

QATIE_BEGIN_NAMESPACE

#ifdef QATIE_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

QATIE_END_NAMESPACE
