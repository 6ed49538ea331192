#pragma once

#include <cstdint>

#include "advobj/tensor.hpp"

namespace advobj {

struct AdamState {
  explicit AdamState(const Shape& shape) : m(shape), v(shape) {}

  Tensor m;
  Tensor v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam step on `z` in place. Throws if the gradient holds
/// a non-finite value; the message carries the step index.
void adam_update(Tensor& z, const Tensor& grad, AdamState& state, double learning_rate);

}  // namespace advobj
