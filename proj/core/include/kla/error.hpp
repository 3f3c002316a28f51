#pragma once

#include <stdexcept>

namespace kla {

/// Raised when a numerical precondition fails (non-positive denominator,
/// zero precision where a mean is requested, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace kla
