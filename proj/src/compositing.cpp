#include "advobj/compositing.hpp"

#include <cmath>
#include <set>
#include <string>

namespace advobj {

namespace {

void check_image(const Shape& s, const char* what) {
  if (s.size() != 3 || s[0] != 3) {
    throw ShapeError(std::string(what) + ": expected [3,H,W], got " + shape_str(s));
  }
}

void check_range(const Range& r, const char* name, double identity, bool positive) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
    throw std::invalid_argument(std::string("transform distribution: ") + name + " range is empty");
  }
  if (positive && r.lo <= 0.0) {
    throw std::invalid_argument(std::string("transform distribution: ") + name + " must be positive");
  }
  if (identity < r.lo || identity > r.hi) {
    throw std::invalid_argument(std::string("transform distribution: ") + name +
                                " range excludes the identity value");
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
    }
  }
}

Range read_range(const nlohmann::json& j, const char* key, Range fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_number()) return {v.get<double>(), v.get<double>()};
  if (!v.is_array() || v.size() != 2) {
    throw std::invalid_argument(std::string("transform distribution: '") + key +
                                "' must be a number or [low, high]");
  }
  return {v[0].get<double>(), v[1].get<double>()};
}

}  // namespace

bool TransformParams::is_identity() const { return *this == TransformParams{}; }

void TransformParams::validate() const {
  if (!(scale > 0.0)) throw std::invalid_argument("transform: scale must be positive");
  if (!(brightness > 0.0)) throw std::invalid_argument("transform: brightness must be positive");
  if (!(smoothing_sigma >= 0.0)) throw std::invalid_argument("transform: sigma must be >= 0");
  if (!std::isfinite(dx) || !std::isfinite(dy)) throw std::invalid_argument("transform: bad shift");
}

TransformDistribution TransformDistribution::none() {
  return {{0, 0}, {0, 0}, {1, 1}, {1, 1}, {0, 0}};
}

void TransformDistribution::validate() const {
  check_range(dx, "dx", 0.0, false);
  check_range(dy, "dy", 0.0, false);
  check_range(brightness, "brightness", 1.0, true);
  check_range(scale, "scale", 1.0, true);
  check_range(smoothing_sigma, "smoothing_sigma", 0.0, false);
}

TransformParams sample_transform(const TransformDistribution& dist, Rng& rng) {
  TransformParams t;
  t.dx = rng.uniform(dist.dx.lo, dist.dx.hi);
  t.dy = rng.uniform(dist.dy.lo, dist.dy.hi);
  t.brightness = rng.uniform(dist.brightness.lo, dist.brightness.hi);
  t.scale = rng.uniform(dist.scale.lo, dist.scale.hi);
  t.smoothing_sigma = rng.uniform(dist.smoothing_sigma.lo, dist.smoothing_sigma.hi);
  return t;
}

Var overlay(const Var& background, const Var& patch, double x, double y) {
  check_image(background.shape(), "overlay background");
  check_image(patch.shape(), "overlay patch");
  const std::size_t H = background.shape()[1], W = background.shape()[2];
  const std::size_t h = patch.shape()[1], w = patch.shape()[2];
  if (!(x >= 0.0) || !(y >= 0.0) || x + static_cast<double>(w) > static_cast<double>(W) ||
      y + static_cast<double>(h) > static_cast<double>(H)) {
    throw PlacementError("overlay: " + std::to_string(h) + "x" + std::to_string(w) +
                         " patch at (" + std::to_string(x) + ", " + std::to_string(y) +
                         ") leaves the " + std::to_string(H) + "x" + std::to_string(W) +
                         " background");
  }
  Tensor keep({3, H, W}, 1.0);
  const auto i0 = static_cast<std::size_t>(std::ceil(y));
  const auto j0 = static_cast<std::size_t>(std::ceil(x));
  const auto i1 = static_cast<std::size_t>(std::floor(y + static_cast<double>(h) - 1.0));
  const auto j1 = static_cast<std::size_t>(std::floor(x + static_cast<double>(w) - 1.0));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = i0; i <= i1; ++i)
      for (std::size_t j = j0; j <= j1; ++j) keep.at(c, i, j) = 0.0;
  Tape& tape = background.tape();
  const Var kept = mul(background, tape.constant(std::move(keep)));
  return clamp01(add(kept, grid_translate(patch, x, y, H, W)));
}

Var placement_frame(const Var& background, const PlacementSpec& placement) {
  if (!placement.compose_after_resize) return background;
  check_image(background.shape(), "compose_after_resize background");
  if (placement.frame_h == 0 || placement.frame_w == 0 ||
      placement.frame_h > background.shape()[1] || placement.frame_w > background.shape()[2]) {
    throw std::invalid_argument("compose_after_resize: target frame " +
                                std::to_string(placement.frame_h) + "x" +
                                std::to_string(placement.frame_w) + " must be non-empty and " +
                                "no larger than the background " + shape_str(background.shape()));
  }
  return bilinear_resize(background, placement.frame_h, placement.frame_w);
}

Var compose_after_resize(const Var& background, const Var& patch, std::size_t out_h,
                         std::size_t out_w, double x, double y) {
  PlacementSpec p{x, y, true, out_h, out_w};
  const Var frame = placement_frame(background, p);
  if (patch.shape().size() == 3 && (patch.shape()[1] > out_h || patch.shape()[2] > out_w)) {
    throw PlacementError("compose_after_resize: patch " + shape_str(patch.shape()) +
                         " is larger than the target frame");
  }
  return overlay(frame, patch, x, y);
}

Var apply_transform(const Var& patch, const Var& background, const TransformParams& t,
                    const PlacementSpec& placement) {
  t.validate();
  check_image(patch.shape(), "apply_transform patch");
  const Var frame = placement_frame(background, placement);
  const std::size_t h = patch.shape()[1], w = patch.shape()[2];
  Var scaled = patch;
  double x = placement.x + t.dx, y = placement.y + t.dy;
  if (t.scale != 1.0) {
    const auto sh = static_cast<std::size_t>(std::max(1.0, std::round(t.scale * h)));
    const auto sw = static_cast<std::size_t>(std::max(1.0, std::round(t.scale * w)));
    scaled = bilinear_resize(patch, sh, sw);
    x += (static_cast<double>(w) - static_cast<double>(sw)) / 2.0;
    y += (static_cast<double>(h) - static_cast<double>(sh)) / 2.0;
  }
  Var out = overlay(frame, scaled, x, y);
  if (t.brightness != 1.0) out = clamp01(scalar_scale(out, t.brightness));
  if (t.smoothing_sigma > 0.0) out = gaussian_blur(out, t.smoothing_sigma);
  return out;
}

nlohmann::json to_json(const TransformParams& t) {
  return {{"dx", t.dx},
          {"dy", t.dy},
          {"brightness", t.brightness},
          {"scale", t.scale},
          {"smoothing_sigma", t.smoothing_sigma}};
}

TransformParams transform_params_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"dx", "dy", "brightness", "scale", "smoothing_sigma"}, "transform");
  TransformParams t;
  t.dx = j.value("dx", t.dx);
  t.dy = j.value("dy", t.dy);
  t.brightness = j.value("brightness", t.brightness);
  t.scale = j.value("scale", t.scale);
  t.smoothing_sigma = j.value("smoothing_sigma", t.smoothing_sigma);
  t.validate();
  return t;
}

nlohmann::json to_json(const TransformDistribution& d) {
  auto r = [](const Range& x) { return nlohmann::json::array({x.lo, x.hi}); };
  return {{"dx", r(d.dx)},
          {"dy", r(d.dy)},
          {"brightness", r(d.brightness)},
          {"scale", r(d.scale)},
          {"smoothing_sigma", r(d.smoothing_sigma)}};
}

TransformDistribution transform_distribution_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"dx", "dy", "brightness", "scale", "smoothing_sigma"},
                 "transform distribution");
  TransformDistribution d;
  d.dx = read_range(j, "dx", d.dx);
  d.dy = read_range(j, "dy", d.dy);
  d.brightness = read_range(j, "brightness", d.brightness);
  d.scale = read_range(j, "scale", d.scale);
  d.smoothing_sigma = read_range(j, "smoothing_sigma", d.smoothing_sigma);
  d.validate();
  return d;
}

nlohmann::json to_json(const PlacementSpec& p) {
  nlohmann::json j{{"x", p.x}, {"y", p.y}, {"compose_after_resize", p.compose_after_resize}};
  if (p.compose_after_resize) j["frame"] = {p.frame_h, p.frame_w};
  return j;
}

PlacementSpec placement_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"x", "y", "compose_after_resize", "frame"}, "placement");
  PlacementSpec p;
  p.x = j.value("x", p.x);
  p.y = j.value("y", p.y);
  p.compose_after_resize = j.value("compose_after_resize", false);
  if (j.contains("frame")) {
    const auto& f = j.at("frame");
    if (!f.is_array() || f.size() != 2) {
      throw std::invalid_argument("placement: 'frame' must be [height, width]");
    }
    p.frame_h = f[0].get<std::size_t>();
    p.frame_w = f[1].get<std::size_t>();
  }
  if (p.compose_after_resize && (p.frame_h == 0 || p.frame_w == 0)) {
    throw std::invalid_argument("placement: compose_after_resize needs 'frame'");
  }
  return p;
}

}  // namespace advobj
