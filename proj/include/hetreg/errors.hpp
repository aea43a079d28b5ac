#pragma once

#include <stdexcept>
#include <string>

namespace hetreg {

/// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

/// An argument is outside its admissible range.
class ArgumentError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unreadable file; the message names the byte offset when known.
class IoError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// A metric is undefined for the given input (e.g. empty label mask).
class MetricUndefined : public std::domain_error
{
public:
  using std::domain_error::domain_error;
};

} // namespace hetreg
