#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "advobj/models.hpp"

namespace advobj {

inline constexpr int kBundleVersion = 1;

class BundleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ChecksumError : public BundleError {
 public:
  using BundleError::BundleError;
};
class UnsupportedVersionError : public BundleError {
 public:
  using BundleError::BundleError;
};
class TruncatedBundleError : public BundleError {
 public:
  using BundleError::BundleError;
};
class BundleFormatError : public BundleError {
 public:
  using BundleError::BundleError;
};

struct TensorEntry {
  std::string name;
  Shape shape;
};

/// Serialized model. On disk:
///
///   advobj-bundle <manifest bytes> <manifest crc32 hex>\n
///   <manifest: UTF-8 JSON>
///   <blob: little-endian float32 weights in manifest tensor order>
///
/// The manifest carries the blob size and its crc32.
struct ModelBundle {
  int version = kBundleVersion;
  std::string kind;  // "generator" or "detector"
  nlohmann::json architecture;
  std::vector<std::string> class_names;
  std::vector<TensorEntry> tensors;
  std::vector<float> weights;
  nlohmann::json metadata = nlohmann::json::object();

  friend bool operator==(const ModelBundle& a, const ModelBundle& b);
};

std::string serialize_bundle(const ModelBundle& bundle);
ModelBundle parse_bundle(const std::string& bytes);

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);

ModelBundle to_bundle(const Generator& generator, nlohmann::json metadata = {});
ModelBundle to_bundle(const Detector& detector, nlohmann::json metadata = {});
Generator generator_from_bundle(const ModelBundle& bundle);
Detector detector_from_bundle(const ModelBundle& bundle);

Generator load_generator(const std::filesystem::path& path);
Detector load_detector(const std::filesystem::path& path);

/// Rounds every weight to float32 precision so that the in-memory model
/// equals what a save/load round trip yields.
Network quantize_to_float32(const Network& network);

std::uint32_t crc32_of(std::string_view bytes);

}  // namespace advobj
