#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stp/autodiff.hpp"

namespace stp {

class NonDeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  /// Distinct coordinates to sample across all non-frozen parameters; 0 checks
  /// every one.
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  /// Lower bound on the relative-error denominator, so coordinates whose true
  /// gradient is ~0 are judged on absolute error instead.
  double denominator_floor = 1e-6;
};

struct CoordCheck {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct ParamCheck {
  std::string name;
  std::size_t coords = 0;
  double max_rel_error = 0.0;
};

struct CheckReport {
  std::vector<ParamCheck> params;
  std::vector<CoordCheck> coords;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

/// Builds the scalar loss on the given tape from the current parameter values.
using LossClosure = std::function<Tensor(Tape&)>;

/// Compares reverse-mode gradients with central differences. Frozen
/// parameters are left out of the report.
CheckReport finite_diff_check(const LossClosure& loss, std::span<Parameter* const> params,
                              const GradCheckOptions& opts = {});

}  // namespace stp
