#include "qmet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qmet::diff {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const TapeBuilder& build, ParamStore& store, ParamId param,
                           double step, double tolerance) {
  if (!(step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  GradCheckReport report;

  store.zero_grad();
  Tape base;
  const Var root = build(base);
  if (base.at_kink()) {
    report.nondifferentiable_point = true;
    return report;
  }
  const std::uint64_t signature = base.branch_signature();
  base.backward(root);
  const Array analytic = store.grad(param);

  Array& values = store.value(param);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    Tape plus;
    const double f_plus = plus.value(build(plus)).item();
    const bool same_plus = plus.branch_signature() == signature;
    values[i] = saved - step;
    Tape minus;
    const double f_minus = minus.value(build(minus)).item();
    const bool same_minus = minus.branch_signature() == signature;
    values[i] = saved;
    if (!same_plus || !same_minus) {
      ++report.excluded;
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * step);
    report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic[i], numeric));
    ++report.checked;
  }
  report.passed = report.max_rel_error < tolerance;
  store.zero_grad();
  return report;
}

GradCheckReport grad_check_all(const TapeBuilder& build, ParamStore& store, double step,
                               double tolerance) {
  GradCheckReport merged;
  for (ParamId id : store.ids()) {
    const GradCheckReport r = grad_check(build, store, id, step, tolerance);
    if (r.nondifferentiable_point) {
      merged.nondifferentiable_point = true;
      return merged;
    }
    merged.max_rel_error = std::max(merged.max_rel_error, r.max_rel_error);
    merged.checked += r.checked;
    merged.excluded += r.excluded;
  }
  merged.passed = merged.max_rel_error < tolerance;
  return merged;
}

}  // namespace qmet::diff
