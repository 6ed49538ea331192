#include "advobj/scene.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "advobj/rng.hpp"

namespace advobj {

namespace {

class Canvas {
 public:
  Canvas(std::size_t w, std::size_t h) : image_({3, h, w}), w_(w), h_(h) {}

  void fill(const Color& c) {
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < h_; ++i)
        for (std::size_t j = 0; j < w_; ++j) image_.at(ch, i, j) = c[ch];
  }

  // Paints every pixel whose centre satisfies `inside(px, py)`.
  template <typename Inside>
  void paint(double x0, double y0, double x1, double y1, const Color& c, Inside inside) {
    const auto lo_y = static_cast<std::size_t>(std::max(0.0, std::floor(y0)));
    const auto lo_x = static_cast<std::size_t>(std::max(0.0, std::floor(x0)));
    const auto hi_y = static_cast<std::size_t>(std::clamp(std::ceil(y1), 0.0, double(h_)));
    const auto hi_x = static_cast<std::size_t>(std::clamp(std::ceil(x1), 0.0, double(w_)));
    for (std::size_t i = lo_y; i < hi_y; ++i)
      for (std::size_t j = lo_x; j < hi_x; ++j)
        if (inside(j + 0.5, i + 0.5))
          for (std::size_t ch = 0; ch < 3; ++ch) image_.at(ch, i, j) = c[ch];
  }

  void rect(double x, double y, double w, double h, const Color& c) {
    paint(x, y, x + w, y + h, c, [&](double px, double py) {
      return px >= x && px < x + w && py >= y && py < y + h;
    });
  }

  void disk(double cx, double cy, double r, const Color& c) {
    paint(cx - r, cy - r, cx + r, cy + r, c, [&](double px, double py) {
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    });
  }

  void diamond(double cx, double cy, double r, const Color& c) {
    paint(cx - r, cy - r, cx + r, cy + r, c,
          [&](double px, double py) { return std::abs(px - cx) + std::abs(py - cy) <= r; });
  }

  // Upward triangle with apex at (cx, top) and base at y = top + size.
  void triangle(double cx, double top, double size, double shrink, const Color& c) {
    const double cy = top + size * 2.0 / 3.0;  // centroid
    const double s = size * shrink;
    const double apex_y = cy - s * 2.0 / 3.0, base_y = cy + s / 3.0, half = s / 2.0;
    paint(cx - half, apex_y, cx + half, base_y, c, [&](double px, double py) {
      if (py < apex_y || py > base_y) return false;
      const double t = (py - apex_y) / s;
      return std::abs(px - cx) <= t * half;
    });
  }

  Tensor& image() { return image_; }

 private:
  Tensor image_;
  std::size_t w_, h_;
};

Color random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

void draw_sign(Canvas& canvas, const SignClass& cls, const Box& box) {
  const double cx = box.x + box.w / 2, cy = box.y + box.h / 2, r = box.w / 2;
  switch (cls.shape) {
    case SignShape::kRing:
      canvas.disk(cx, cy, r, cls.border);
      canvas.disk(cx, cy, r * 0.74, cls.fill);
      break;
    case SignShape::kDisk:
      canvas.disk(cx, cy, r, cls.border);
      canvas.disk(cx, cy, r * 0.86, cls.fill);
      break;
    case SignShape::kTriangle:
      canvas.triangle(cx, box.y, box.h, 1.0, cls.border);
      canvas.triangle(cx, box.y, box.h, 0.62, cls.fill);
      break;
  }
}

void draw_distractor(Canvas& canvas, Rng& rng, double width, double height) {
  const int kind = static_cast<int>(rng.uniform_int(0, 2));
  const double size = rng.uniform(8.0, 40.0);
  const double x = rng.uniform(-size / 2, width - size / 2);
  const double y = rng.uniform(-size / 2, height - size / 2);
  const Color c = random_color(rng);
  switch (kind) {
    case 0: canvas.rect(x, y, size, size * rng.uniform(0.4, 2.0), c); break;
    case 1: canvas.disk(x + size / 2, y + size / 2, size / 2, c); break;
    default: canvas.diamond(x + size / 2, y + size / 2, size / 2, c); break;
  }
}

SignShape parse_shape(const std::string& s) {
  if (s == "ring") return SignShape::kRing;
  if (s == "disk") return SignShape::kDisk;
  if (s == "triangle") return SignShape::kTriangle;
  throw SpecError("scene spec: classes[].shape: unknown shape '" + s + "'");
}

const char* shape_name(SignShape s) {
  switch (s) {
    case SignShape::kRing: return "ring";
    case SignShape::kDisk: return "disk";
    case SignShape::kTriangle: return "triangle";
  }
  return "?";
}

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) throw SpecError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw SpecError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
T read(const nlohmann::json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SpecError(where + ": key '" + key + "' missing or of the wrong type");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const std::string& key, const std::string& where, T& out) {
  if (j.contains(key)) out = read<T>(j, key, where);
}

Color read_color(const nlohmann::json& j, const std::string& key, const std::string& where) {
  const auto v = read<std::vector<double>>(j, key, where);
  if (v.size() != 3 || std::any_of(v.begin(), v.end(), [](double c) { return c < 0 || c > 1; })) {
    throw SpecError(where + ": key '" + key + "' must be three values in [0,1]");
  }
  return {v[0], v[1], v[2]};
}

void read_range(const nlohmann::json& j, const std::string& key, const std::string& where,
                double& lo, double& hi) {
  if (!j.contains(key)) return;
  const auto v = read<std::vector<double>>(j, key, where);
  if (v.size() != 2 || v[0] > v[1]) {
    throw SpecError(where + ": key '" + key + "' must be [low, high] with low <= high");
  }
  lo = v[0];
  hi = v[1];
}

void validate(const SceneSpec& spec) {
  if (spec.width < 16 || spec.height < 16) throw SpecError("scene spec: width/height too small");
  if (spec.max_signs > 0 && spec.classes.empty()) {
    throw SpecError("scene spec: classes: signs requested but no classes defined");
  }
  if (spec.min_signs > spec.max_signs) throw SpecError("scene spec: signs_per_scene: low > high");
  if (spec.min_sign_size < 4 || spec.max_sign_size > std::min(spec.width, spec.height)) {
    throw SpecError("scene spec: sign_size: out of range");
  }
  if (spec.background != "clutter" && spec.background != "gradient" &&
      spec.background != "flat") {
    throw SpecError("scene spec: background: unknown kind '" + spec.background + "'");
  }
  if (spec.min_distractors > spec.max_distractors) {
    throw SpecError("scene spec: distractors: low > high");
  }
  if (spec.noise < 0 || spec.noise > 0.5) throw SpecError("scene spec: noise: out of range");
}

}  // namespace

SceneSpec SceneSpec::reference() {
  SceneSpec spec;
  spec.classes = {
      {"prohibitory", SignShape::kRing, {1.0, 1.0, 1.0}, {0.85, 0.05, 0.05}},
      {"mandatory", SignShape::kDisk, {0.05, 0.25, 0.85}, {1.0, 1.0, 1.0}},
      {"danger", SignShape::kTriangle, {1.0, 1.0, 1.0}, {0.85, 0.05, 0.05}},
  };
  return spec;
}

SceneSpec SceneSpec::sign_free() {
  SceneSpec spec = reference();
  spec.min_signs = 0;
  spec.max_signs = 0;
  return spec;
}

std::vector<std::string> class_names(const SceneSpec& spec) {
  std::vector<std::string> names{"background"};
  for (const auto& c : spec.classes) names.push_back(c.name);
  return names;
}

SyntheticScene render_scene(const SceneSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed);
  const double W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);
  Canvas canvas(spec.width, spec.height);

  const Color sky{rng.uniform(0.55, 0.9), rng.uniform(0.6, 0.9), rng.uniform(0.7, 1.0)};
  const Color ground{rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.45)};
  if (spec.background == "flat") {
    const double g = rng.uniform(0.3, 0.7);
    canvas.fill({g, g, g});
  } else {
    const double horizon = rng.uniform(0.3, 0.7) * H;
    Tensor& img = canvas.image();
    for (std::size_t i = 0; i < spec.height; ++i) {
      const double t = std::clamp((i + 0.5 - horizon) / (0.15 * H) + 0.5, 0.0, 1.0);
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t j = 0; j < spec.width; ++j)
          img.at(ch, i, j) = (1.0 - t) * sky[ch] + t * ground[ch];
    }
  }
  if (spec.background == "clutter") {
    const auto n = rng.uniform_int(static_cast<std::int64_t>(spec.min_distractors),
                                   static_cast<std::int64_t>(spec.max_distractors));
    for (std::int64_t k = 0; k < n; ++k) draw_distractor(canvas, rng, W, H);
  }

  SyntheticScene scene;
  scene.seed = seed;
  const auto count = rng.uniform_int(static_cast<std::int64_t>(spec.min_signs),
                                     static_cast<std::int64_t>(spec.max_signs));
  for (std::int64_t k = 0; k < count; ++k) {
    const auto cls = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(spec.classes.size()) - 1));
    const double size = std::round(rng.uniform(spec.min_sign_size, spec.max_sign_size));
    for (int attempt = 0; attempt < 50; ++attempt) {
      const Box box{std::round(rng.uniform(0.0, W - size)), std::round(rng.uniform(0.0, H - size)),
                    size, size};
      const bool overlaps = std::any_of(scene.annotations.begin(), scene.annotations.end(),
                                        [&](const Annotation& a) { return a.box.intersects(box); });
      if (overlaps) continue;
      draw_sign(canvas, spec.classes[cls], box);
      scene.annotations.push_back({cls + 1, box});
      break;
    }
  }

  Tensor& img = canvas.image();
  if (spec.noise > 0.0) {
    for (double& v : img.data()) v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
  }
  scene.image = std::move(img);
  return scene;
}

Tensor render_patch(const PatchSpec& spec, std::uint64_t seed) {
  if (spec.size < 8) throw SpecError("patch spec: size: too small");
  if (spec.shapes.empty()) throw SpecError("patch spec: shapes: empty");
  if (spec.min_shapes > spec.max_shapes) throw SpecError("patch spec: shapes_per_patch: low > high");
  Rng rng(seed);
  const double S = static_cast<double>(spec.size);
  Canvas canvas(spec.size, spec.size);
  canvas.fill(random_color(rng));
  const auto n = rng.uniform_int(static_cast<std::int64_t>(spec.min_shapes),
                                 static_cast<std::int64_t>(spec.max_shapes));
  for (std::int64_t k = 0; k < n; ++k) {
    const std::string& shape = spec.shapes[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(spec.shapes.size()) - 1))];
    const Color c = random_color(rng);
    const double size = rng.uniform(0.3, 0.9) * S;
    const double cx = rng.uniform(0.25, 0.75) * S, cy = rng.uniform(0.25, 0.75) * S;
    if (shape == "rect") {
      canvas.rect(cx - size / 2, cy - size / 3, size, size * rng.uniform(0.3, 0.9), c);
    } else if (shape == "disk") {
      canvas.disk(cx, cy, size / 2, c);
    } else if (shape == "diamond") {
      canvas.diamond(cx, cy, size / 2, c);
    } else if (shape == "stripes") {
      const double band = rng.uniform(2.0, 6.0);
      for (double y = 0.0; y < S; y += 2 * band) canvas.rect(0.0, y, S, band, c);
    } else if (shape == "cross") {
      const double t = size * 0.25;
      canvas.rect(cx - size / 2, cy - t / 2, size, t, c);
      canvas.rect(cx - t / 2, cy - size / 2, t, size, c);
    } else {
      throw SpecError("patch spec: shapes: unknown shape '" + shape + "'");
    }
  }
  return std::move(canvas.image());
}

SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  const std::string where = "scene spec";
  reject_unknown_keys(j, {"kind", "width", "height", "classes", "signs_per_scene", "sign_size",
                          "background", "distractors", "noise", "count", "seed"},
                      where);
  SceneSpec spec = SceneSpec::reference();
  read_opt(j, "width", where, spec.width);
  read_opt(j, "height", where, spec.height);
  if (j.contains("classes")) {
    if (!j["classes"].is_array()) throw SpecError(where + ": key 'classes' must be an array");
    spec.classes.clear();
    for (const auto& cj : j["classes"]) {
      const std::string cw = where + ": classes[]";
      reject_unknown_keys(cj, {"name", "shape", "fill", "border"}, cw);
      SignClass c;
      c.name = read<std::string>(cj, "name", cw);
      c.shape = parse_shape(read<std::string>(cj, "shape", cw));
      c.fill = read_color(cj, "fill", cw);
      c.border = read_color(cj, "border", cw);
      spec.classes.push_back(std::move(c));
    }
  }
  double lo = static_cast<double>(spec.min_signs), hi = static_cast<double>(spec.max_signs);
  read_range(j, "signs_per_scene", where, lo, hi);
  spec.min_signs = static_cast<std::size_t>(lo);
  spec.max_signs = static_cast<std::size_t>(hi);
  read_range(j, "sign_size", where, spec.min_sign_size, spec.max_sign_size);
  read_opt(j, "background", where, spec.background);
  lo = static_cast<double>(spec.min_distractors);
  hi = static_cast<double>(spec.max_distractors);
  read_range(j, "distractors", where, lo, hi);
  spec.min_distractors = static_cast<std::size_t>(lo);
  spec.max_distractors = static_cast<std::size_t>(hi);
  read_opt(j, "noise", where, spec.noise);
  validate(spec);
  return spec;
}

nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : spec.classes) {
    classes.push_back({{"name", c.name},
                       {"shape", shape_name(c.shape)},
                       {"fill", c.fill},
                       {"border", c.border}});
  }
  return {{"kind", "scenes"},
          {"width", spec.width},
          {"height", spec.height},
          {"classes", std::move(classes)},
          {"signs_per_scene", {spec.min_signs, spec.max_signs}},
          {"sign_size", {spec.min_sign_size, spec.max_sign_size}},
          {"background", spec.background},
          {"distractors", {spec.min_distractors, spec.max_distractors}},
          {"noise", spec.noise}};
}

PatchSpec patch_spec_from_json(const nlohmann::json& j) {
  const std::string where = "patch spec";
  reject_unknown_keys(j, {"kind", "size", "shapes", "shapes_per_patch", "count", "seed"}, where);
  PatchSpec spec;
  read_opt(j, "size", where, spec.size);
  read_opt(j, "shapes", where, spec.shapes);
  double lo = static_cast<double>(spec.min_shapes), hi = static_cast<double>(spec.max_shapes);
  read_range(j, "shapes_per_patch", where, lo, hi);
  spec.min_shapes = static_cast<std::size_t>(lo);
  spec.max_shapes = static_cast<std::size_t>(hi);
  for (const auto& s : spec.shapes) {
    if (s != "rect" && s != "disk" && s != "diamond" && s != "stripes" && s != "cross") {
      throw SpecError(where + ": shapes: unknown shape '" + s + "'");
    }
  }
  if (spec.size < 8) throw SpecError(where + ": size: too small");
  return spec;
}

nlohmann::json to_json(const PatchSpec& spec) {
  return {{"kind", "patches"},
          {"size", spec.size},
          {"shapes", spec.shapes},
          {"shapes_per_patch", {spec.min_shapes, spec.max_shapes}}};
}

}  // namespace advobj
