#pragma once

#include <limits>
#include <stdexcept>
#include <string>

namespace mlse {

/// Argument outside an operation's domain (negative variance, bad order, ...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A quantity that should be finite was not. Carries the quadrature node
/// (or sample) at which it happened, NaN when not applicable.
class NumericDomainError : public std::domain_error {
 public:
  explicit NumericDomainError(const std::string& what, double node = std::numeric_limits<double>::quiet_NaN())
      : std::domain_error(what), node_(node) {}

  double node() const noexcept { return node_; }

 private:
  double node_;
};

/// Operation is well defined in general but not for this configuration,
/// e.g. a stability expansion around a fixed point that does not exist.
class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace mlse
