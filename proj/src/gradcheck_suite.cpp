#include "advobj/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include "advobj/gradcheck.hpp"

namespace advobj {

namespace {

using TensorFn = std::function<Var(Tape&, const Var&)>;
using Sampler = std::function<double(Rng&)>;

struct OpCase {
  std::string name;
  Shape shape;
  Sampler sample;
  TensorFn fn;
};

Sampler uniform(double lo, double hi) {
  return [=](Rng& r) { return r.uniform(lo, hi); };
}

// Uniform in [-1, 1] but at least `gap` away from `kink`.
Sampler away_from(double kink, double gap) {
  return [=](Rng& r) {
    const double mag = r.uniform(gap, 1.0);
    return kink + (r.uniform() < 0.5 ? -mag : mag);
  };
}

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<OpCase> op_cases(Rng& rng) {
  const Tensor c234 = random_tensor({2, 3, 4}, rng);
  const Tensor m42 = random_tensor({4, 2}, rng);
  const Tensor m34 = random_tensor({3, 4}, rng);
  const Tensor img = random_tensor({2, 6, 5}, rng);
  const Tensor weight = random_tensor({3, 2, 3, 3}, rng);
  const Tensor bias = random_tensor({3}, rng);
  auto k = [](const Tensor& t) { return [t](Tape& tape) { return tape.constant(t); }; };
  const auto C = k(c234), M42 = k(m42), M34 = k(m34), IMG = k(img), W = k(weight), B = k(bias);
  const Sampler any = uniform(-1.0, 1.0);

  std::vector<OpCase> cases = {
      {"add/lhs", {2, 3, 4}, any, [=](Tape& t, const Var& x) { return add(x, C(t)); }},
      {"add/rhs", {2, 3, 4}, any, [=](Tape& t, const Var& x) { return add(C(t), x); }},
      {"add/broadcast", {1}, any, [=](Tape& t, const Var& x) { return add(C(t), x); }},
      {"sub/lhs", {2, 3, 4}, any, [=](Tape& t, const Var& x) { return sub(x, C(t)); }},
      {"sub/rhs", {2, 3, 4}, any, [=](Tape& t, const Var& x) { return sub(C(t), x); }},
      {"mul/lhs", {2, 3, 4}, any, [=](Tape& t, const Var& x) { return mul(x, C(t)); }},
      {"mul/rhs", {2, 3, 4}, any, [=](Tape& t, const Var& x) { return mul(C(t), x); }},
      {"mul/self", {2, 3, 4}, any, [](Tape&, const Var& x) { return mul(x, x); }},
      {"mul/broadcast", {1}, any, [=](Tape& t, const Var& x) { return mul(x, C(t)); }},
      {"matmul/lhs", {3, 4}, any, [=](Tape& t, const Var& x) { return matmul(x, M42(t)); }},
      {"matmul/rhs", {4, 2}, any, [=](Tape& t, const Var& x) { return matmul(M34(t), x); }},
      {"conv2d/input", {2, 6, 5}, any,
       [=](Tape& t, const Var& x) { return conv2d(x, W(t), B(t), 1, 1); }},
      {"conv2d/input-stride2", {2, 6, 5}, any,
       [=](Tape& t, const Var& x) { return conv2d(x, W(t), B(t), 2, 1); }},
      {"conv2d/weight", {3, 2, 3, 3}, any,
       [=](Tape& t, const Var& x) { return conv2d(IMG(t), x, B(t), 1, 0); }},
      {"conv2d/bias", {3}, any, [=](Tape& t, const Var& x) { return conv2d(IMG(t), W(t), x, 2, 1); }},
      {"relu", {2, 3, 4}, away_from(0.0, 0.05), [](Tape&, const Var& x) { return relu(x); }},
      {"tanh", {2, 3, 4}, uniform(-2, 2), [](Tape&, const Var& x) { return tanh(x); }},
      {"sigmoid", {2, 3, 4}, uniform(-3, 3), [](Tape&, const Var& x) { return sigmoid(x); }},
      {"log", {2, 3, 4}, uniform(0.2, 2), [](Tape&, const Var& x) { return log(x); }},
      {"exp", {2, 3, 4}, uniform(-2, 2), [](Tape&, const Var& x) { return exp(x); }},
      {"sqrt", {2, 3, 4}, uniform(0.2, 2), [](Tape&, const Var& x) { return sqrt(x); }},
      {"sum", {2, 3, 4}, any, [](Tape&, const Var& x) { return sum(x); }},
      {"mean", {2, 3, 4}, any, [](Tape&, const Var& x) { return mean(x); }},
      {"clamp01", {2, 3, 4}, uniform(0.02, 0.98), [](Tape&, const Var& x) { return clamp01(x); }},
      {"clamp_min", {2, 3, 4}, away_from(0.1, 0.05),
       [](Tape&, const Var& x) { return clamp_min(x, 0.1); }},
      {"bilinear_resize/up", {2, 4, 5}, any,
       [](Tape&, const Var& x) { return bilinear_resize(x, 7, 9); }},
      {"bilinear_resize/down", {2, 8, 7}, any,
       [](Tape&, const Var& x) { return bilinear_resize(x, 5, 3); }},
      {"grid_translate", {2, 4, 5}, any,
       [](Tape&, const Var& x) { return grid_translate(x, 1.3, 2.6, 8, 9); }},
      {"scalar_scale", {2, 3, 4}, any, [](Tape&, const Var& x) { return scalar_scale(x, -1.7); }},
      {"add_scalar", {2, 3, 4}, any, [](Tape&, const Var& x) { return add_scalar(x, 0.4); }},
      {"reshape", {2, 3, 4}, any, [](Tape&, const Var& x) { return reshape(x, {6, 4}); }},
      {"transpose", {3, 4}, any, [](Tape&, const Var& x) { return transpose(x); }},
      {"softmax_rows", {3, 4}, uniform(-2, 2), [](Tape&, const Var& x) { return softmax_rows(x); }},
      {"select_column", {3, 4}, any, [](Tape&, const Var& x) { return select_column(x, 2); }},
      {"gather", {24}, any, [](Tape&, const Var& x) { return gather(x, {0, 5, 5, 23, 7}); }},
      {"gaussian_blur", {2, 6, 5}, any, [](Tape&, const Var& x) { return gaussian_blur(x, 0.8); }},
      {"crop_resize", {2, 6, 5}, any,
       [](Tape&, const Var& x) { return crop_resize(x, 0.7, 1.2, 3.1, 4.0, 3, 4); }},
  };
  return cases;
}

}  // namespace

std::vector<CheckResult> check_ops(std::size_t points, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck-ops"));
  std::vector<CheckResult> out;
  for (const auto& c : op_cases(rng)) {
    CheckResult r{c.name, points, 0.0, kOpTolerance};
    std::optional<Tensor> weights;
    for (std::size_t p = 0; p < points; ++p) {
      Tensor x(c.shape);
      for (double& v : x.data()) v = c.sample(rng);
      if (!weights) {
        Tape probe;
        weights = random_tensor(c.fn(probe, probe.constant(x)).shape(), rng);
      }
      const Tensor& w = *weights;
      const double err = grad_check(
          [&](Tape& tape, const Var& v) { return sum(mul(c.fn(tape, v), tape.constant(w))); }, x);
      r.max_rel_error = std::max(r.max_rel_error, err);
    }
    out.push_back(r);
  }
  return out;
}

CheckResult check_pipeline(const Generator& generator, const Detector& detector,
                           const Tensor& background, const AttackConfig& config,
                           std::size_t points, std::uint64_t seed) {
  check_attack_inputs(generator, detector, background, config);
  TransformDistribution dist = config.transform_dist;
  dist.brightness.hi = std::min(dist.brightness.hi, 1.0);
  Rng rng(derive_seed(seed, "gradcheck-pipeline"));
  CheckResult r{"attack_loss", points, 0.0, kPipelineTolerance};
  for (std::size_t p = 0; p < points; ++p) {
    const Tensor z = init_latent(generator.latent_dim(), rng);
    const TransformParams t =
        config.eot_enabled ? sample_transform(dist, rng) : TransformParams::identity();
    const double err = grad_check(
        [&](Tape& tape, const Var& v) {
          return total_loss(tape, v, generator, detector, background, config, std::span(&t, 1)).total;
        },
        z);
    r.max_rel_error = std::max(r.max_rel_error, err);
  }
  return r;
}

nlohmann::json to_json(const std::vector<CheckResult>& results) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : results) {
    out.push_back({{"name", r.name},
                   {"points", r.points},
                   {"max_rel_error", r.max_rel_error},
                   {"tolerance", r.tolerance},
                   {"passed", r.passed()}});
  }
  return out;
}

}  // namespace advobj
