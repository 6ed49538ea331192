#pragma once

#include <cstddef>
#include <stdexcept>

#include "json.hpp"
#include "advobj/autodiff.hpp"
#include "advobj/rng.hpp"

namespace advobj {

/// Raised when a patch footprint leaves the background.
class PlacementError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct TransformParams {
  double dx = 0.0;
  double dy = 0.0;
  double brightness = 1.0;
  double scale = 1.0;
  double smoothing_sigma = 0.0;

  static TransformParams identity() { return {}; }
  bool is_identity() const;
  void validate() const;
  friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const Range&, const Range&) = default;
};

struct TransformDistribution {
  Range dx{-4.0, 4.0};
  Range dy{-4.0, 4.0};
  Range brightness{0.7, 1.3};
  Range scale{0.8, 1.2};
  Range smoothing_sigma{0.0, 1.0};

  /// Only the identity transform.
  static TransformDistribution none();
  /// Throws std::invalid_argument on empty or non-positive ranges, or when a
  /// range excludes the identity value.
  void validate() const;
};

/// Draws dx, dy, brightness, scale, sigma in that order, each uniform.
TransformParams sample_transform(const TransformDistribution& dist, Rng& rng);

struct PlacementSpec {
  double x = 0.0;  // patch top-left in background (or resized frame) pixels
  double y = 0.0;
  /// When set, the background is first bilinearly resized to
  /// frame_h x frame_w and the patch is overlaid in that frame.
  bool compose_after_resize = false;
  std::size_t frame_h = 0;
  std::size_t frame_w = 0;
};

/// Pixels (i,j) with y <= i <= y+h-1 and x <= j <= x+w-1 take the patch value
/// resampled at (i-y, j-x); the rest keep the background. The result is
/// clamped to [0,1]. Throws PlacementError if the footprint leaves the image.
Var overlay(const Var& background, const Var& patch, double x, double y);

/// Patch is resized about its centre by `scale`, moved by (dx, dy), overlaid,
/// then the composite is multiplied by brightness, clamped and blurred.
Var apply_transform(const Var& patch, const Var& background, const TransformParams& t,
                    const PlacementSpec& placement);

/// Bilinearly downsizes the background to out_h x out_w, then overlays.
Var compose_after_resize(const Var& background, const Var& patch, std::size_t out_h,
                         std::size_t out_w, double x, double y);

/// Background in the frame the patch is composed into.
Var placement_frame(const Var& background, const PlacementSpec& placement);

nlohmann::json to_json(const TransformParams& t);
TransformParams transform_params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TransformDistribution& d);
TransformDistribution transform_distribution_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PlacementSpec& p);
PlacementSpec placement_from_json(const nlohmann::json& j);

}  // namespace advobj
