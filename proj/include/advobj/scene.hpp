#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "advobj/models.hpp"

namespace advobj {

using Color = std::array<double, 3>;

/// Raised for malformed dataset specs; the message names the offending key.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class SignShape { kRing, kDisk, kTriangle };

struct SignClass {
  std::string name;
  SignShape shape = SignShape::kRing;
  Color fill{1.0, 1.0, 1.0};
  Color border{0.8, 0.05, 0.05};
};

struct SceneSpec {
  std::size_t width = 128;
  std::size_t height = 128;
  std::vector<SignClass> classes;
  std::size_t min_signs = 0;
  std::size_t max_signs = 2;
  double min_sign_size = 20.0;
  double max_sign_size = 44.0;
  std::string background = "clutter";  // clutter | gradient | flat
  std::size_t min_distractors = 2;
  std::size_t max_distractors = 6;
  double noise = 0.02;

  /// Three sign classes mirroring prohibitory, mandatory and danger signs.
  static SceneSpec reference();
  /// Same scene family with no signs.
  static SceneSpec sign_free();
};

struct Annotation {
  std::size_t class_id = 0;  // 1-based; 0 is background
  Box box;
};

struct SyntheticScene {
  Tensor image;  // [3,H,W] in [0,1]
  std::vector<Annotation> annotations;
  std::uint64_t seed = 0;
};

SyntheticScene render_scene(const SceneSpec& spec, std::uint64_t seed);

/// Logo-like patches used to train the reference generator.
struct PatchSpec {
  std::size_t size = 32;
  std::vector<std::string> shapes{"rect", "disk", "diamond", "stripes", "cross"};
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
};

Tensor render_patch(const PatchSpec& spec, std::uint64_t seed);

SceneSpec scene_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneSpec& spec);
PatchSpec patch_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PatchSpec& spec);

/// Class names in detector order: "background" followed by the spec classes.
std::vector<std::string> class_names(const SceneSpec& spec);

}  // namespace advobj
