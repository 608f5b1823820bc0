#pragma once

#include <cstddef>
#include <functional>

#include "qmet/tape.hpp"

namespace qmet::diff {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +-step perturbation crossed a kink.
  std::size_t excluded = 0;
  /// The base point itself sits on a kink; nothing was checked.
  bool nondifferentiable_point = false;
  bool passed = true;
};

/// Builds a scalar root on a fresh tape from the current values in a store.
using TapeBuilder = std::function<Var(Tape&)>;

/// Relative error used by grad_check: |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares backward() against central finite differences for every scalar of
/// one parameter. The builder is re-run for each perturbation; it must read
/// parameters only through Tape::param on `store`.
GradCheckReport grad_check(const TapeBuilder& build, ParamStore& store, ParamId param,
                           double step, double tolerance);

/// grad_check over every parameter of the store; the report merges all.
GradCheckReport grad_check_all(const TapeBuilder& build, ParamStore& store, double step,
                               double tolerance);

}  // namespace qmet::diff
