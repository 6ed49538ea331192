#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "advobj/attack.hpp"

namespace advobj {

struct CheckResult {
  std::string name;
  std::size_t points = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
};

inline constexpr double kOpTolerance = 1e-6;
inline constexpr double kPipelineTolerance = 1e-4;

/// Every differentiable op, each operand separately, at `points` random
/// points. The checked scalar is sum(op(x) * W) for a fixed random W.
std::vector<CheckResult> check_ops(std::size_t points = 100, std::uint64_t seed = 0);

/// The full attack loss L0 + kappa * L1 w.r.t. z at `points` random latents,
/// each with its own transform drawn from the config's distribution.
/// Brightness draws are capped at 1 so the straight-through clamp stays
/// inactive.
CheckResult check_pipeline(const Generator& generator, const Detector& detector,
                           const Tensor& background, const AttackConfig& config,
                           std::size_t points = 100, std::uint64_t seed = 0);

nlohmann::json to_json(const std::vector<CheckResult>& results);

}  // namespace advobj
