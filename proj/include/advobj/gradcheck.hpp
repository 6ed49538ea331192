#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "advobj/autodiff.hpp"

namespace advobj {

/// A scalar-valued function built on a tape from one input.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward() against central differences at `point`. The error per
/// coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point, double step = 1e-5);

/// Same comparison restricted to the listed coordinates.
GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point,
                                  const std::vector<std::size_t>& coords, double step = 1e-5);

/// Backward-pass gradient of fn at `point`.
Tensor analytic_gradient(const ScalarFn& fn, const Tensor& point);

/// Maximum relative error over all coordinates.
double grad_check(const ScalarFn& fn, const Tensor& point, double step = 1e-5);

}  // namespace advobj
