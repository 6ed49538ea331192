#include "advobj/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace advobj {

namespace {

double evaluate(const ScalarFn& fn, const Tensor& point) {
  Tape tape;
  const Var x = tape.constant(point);
  return fn(tape, x).value().item();
}

}  // namespace

Tensor analytic_gradient(const ScalarFn& fn, const Tensor& point) {
  Tape tape;
  const Var x = tape.leaf(point);
  const Var loss = fn(tape, x);
  return tape.backward(loss)[x];
}

GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point,
                                  const std::vector<std::size_t>& coords, double step) {
  const Tensor analytic = analytic_gradient(fn, point);
  GradCheckReport report;
  Tensor probe = point;
  for (std::size_t i : coords) {
    if (i >= point.size()) throw std::out_of_range("grad_check: coordinate out of range");
    probe[i] = point[i] + step;
    const double up = evaluate(fn, probe);
    probe[i] = point[i] - step;
    const double down = evaluate(fn, probe);
    probe[i] = point[i];
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (!(err <= report.max_rel_error)) {
      report = {err, i, analytic[i], numeric};
    }
  }
  return report;
}

GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point, double step) {
  std::vector<std::size_t> all(point.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return grad_check_report(fn, point, all, step);
}

double grad_check(const ScalarFn& fn, const Tensor& point, double step) {
  return grad_check_report(fn, point, step).max_rel_error;
}

}  // namespace advobj
