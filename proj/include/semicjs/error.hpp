#pragma once

#include <stdexcept>
#include <string>

namespace semicjs {

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Penalized information matrix is singular or too ill-conditioned to invert.
class SingularInformation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The objective is -inf at every starting point.
class FittingFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// No smoothing candidate could be scored (all folds failed, or all AIC_p
/// evaluations hit singular information).
class SelectionUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BootstrapFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace semicjs
