#include "advobj/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace advobj {

void adam_update(Tensor& z, const Tensor& grad, AdamState& state, double learning_rate) {
  if (z.shape() != grad.shape() || z.shape() != state.m.shape() ||
      z.shape() != state.v.shape()) {
    throw ShapeError("adam_update: shape mismatch between parameter " + shape_str(z.shape()) +
                     ", gradient " + shape_str(grad.shape()) + " and state " +
                     shape_str(state.m.shape()));
  }
  const std::int64_t step = state.t + 1;
  if (!grad.all_finite()) {
    throw std::domain_error("adam_update: non-finite gradient at step " + std::to_string(step));
  }
  state.t = step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < z.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    z[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

}  // namespace advobj
