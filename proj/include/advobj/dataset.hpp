#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "advobj/scene.hpp"

namespace advobj {

/// Missing or inconsistent dataset directory.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetItem {
  std::string file;
  std::uint64_t seed = 0;
  std::string checksum;  // "crc32:xxxxxxxx" of the file bytes
  std::vector<Annotation> annotations;
};

/// Directory layout: manifest.json plus one PNG per item. `kind` is
/// "scenes" or "patches"; `spec` is the normalised generating spec.
struct DatasetManifest {
  std::string kind;
  std::uint64_t seed = 0;
  nlohmann::json spec;
  std::vector<std::string> class_names;
  std::vector<DatasetItem> items;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Renders `count` items from a scene or patch spec (selected by its "kind"
/// key, default "scenes") and writes them to `dir`. Item i uses seed
/// derive_seed(seed, kind) + i. Throws SpecError for a malformed spec.
DatasetManifest write_dataset(const nlohmann::json& spec, std::size_t count, std::uint64_t seed,
                              const std::filesystem::path& dir);

DatasetManifest load_manifest(const std::filesystem::path& dir);

/// Loads the stored scenes, verifying each file checksum.
std::vector<SyntheticScene> load_scenes(const std::filesystem::path& dir,
                                        const DatasetManifest& manifest);
std::vector<Tensor> load_patches(const std::filesystem::path& dir, const DatasetManifest& manifest);

std::string file_checksum(const std::filesystem::path& path);

}  // namespace advobj
