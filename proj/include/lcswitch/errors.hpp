#pragma once

#include <stdexcept>
#include <string>

namespace lcswitch {

/// Base class for every error raised by the library. Each subclass maps to
/// one CLI exit code (see tools/lcswitch.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A parameter or configuration value violates its documented domain.
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

/// A Fock-space or buffer size exceeds a configured limit.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Operands with incompatible dimensions.
class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// Adaptive integrator could not keep the step size above its floor.
class StiffnessError : public Error {
 public:
  using Error::Error;
};

/// A jump step could not bring the first-order jump probability under its cap.
class StepError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during an iterative estimator.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// An estimator refused to run on the supplied data (too few records,
/// degenerate clusters, empty inputs, ...).
class InsufficientData : public Error {
 public:
  using Error::Error;
};

/// A searched-for structure (attractor, linear tail, ...) was not found.
class NotFound : public Error {
 public:
  using Error::Error;
};

/// A nonlinear fit did not converge.
class FitError : public Error {
 public:
  FitError(const std::string& what, double best_residual)
      : Error(what), best_residual_(best_residual) {}
  double best_residual() const noexcept { return best_residual_; }

 private:
  double best_residual_;
};

/// Persisted artifact does not match its recorded checksum or layout.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage failed; carries the stage name.
class StageFailure : public Error {
 public:
  StageFailure(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace lcswitch
