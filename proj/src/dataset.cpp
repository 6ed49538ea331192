#include "advobj/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "advobj/bundle.hpp"
#include "advobj/image_io.hpp"
#include "advobj/rng.hpp"

namespace advobj {

namespace {

std::string checksum_string(std::uint32_t crc) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return std::string("crc32:") + buf;
}

std::string item_name(const std::string& kind, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu.png", kind == "scenes" ? "scene" : "patch", i);
  return buf;
}

}  // namespace

std::string file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("dataset: cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return checksum_string(crc32_of(buf.str()));
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json items_json = nlohmann::json::array();
  for (const auto& it : items) {
    nlohmann::json anns = nlohmann::json::array();
    for (const auto& a : it.annotations) {
      anns.push_back({{"class_id", a.class_id},
                      {"class", a.class_id < class_names.size() ? class_names[a.class_id] : ""},
                      {"box", {a.box.x, a.box.y, a.box.w, a.box.h}}});
    }
    nlohmann::json e{{"file", it.file}, {"seed", it.seed}, {"checksum", it.checksum}};
    if (kind == "scenes") e["annotations"] = anns;
    items_json.push_back(e);
  }
  return {{"kind", kind},
          {"count", items.size()},
          {"seed", seed},
          {"spec", spec},
          {"class_names", class_names},
          {"items", items_json}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.kind = j.at("kind").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.spec = j.at("spec");
    m.class_names = j.value("class_names", std::vector<std::string>{});
    for (const auto& e : j.at("items")) {
      DatasetItem it;
      it.file = e.at("file").get<std::string>();
      it.seed = e.at("seed").get<std::uint64_t>();
      it.checksum = e.at("checksum").get<std::string>();
      if (e.contains("annotations")) {
        for (const auto& a : e.at("annotations")) {
          const auto b = a.at("box").get<std::vector<double>>();
          if (b.size() != 4) throw DatasetError("dataset manifest: box needs 4 numbers");
          it.annotations.push_back({a.at("class_id").get<std::size_t>(), {b[0], b[1], b[2], b[3]}});
        }
      }
      m.items.push_back(std::move(it));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("dataset manifest: ") + e.what());
  }
  if (m.kind != "scenes" && m.kind != "patches") {
    throw DatasetError("dataset manifest: unknown kind '" + m.kind + "'");
  }
  return m;
}

DatasetManifest write_dataset(const nlohmann::json& spec_json, std::size_t count,
                              std::uint64_t seed, const std::filesystem::path& dir) {
  if (!spec_json.is_object()) throw SpecError("dataset spec: expected an object");
  const std::string kind = spec_json.value("kind", std::string("scenes"));
  DatasetManifest m;
  m.kind = kind;
  m.seed = seed;
  SceneSpec scene_spec;
  PatchSpec patch_spec;
  if (kind == "scenes") {
    scene_spec = scene_spec_from_json(spec_json);
    m.spec = to_json(scene_spec);
    m.class_names = class_names(scene_spec);
  } else if (kind == "patches") {
    patch_spec = patch_spec_from_json(spec_json);
    m.spec = to_json(patch_spec);
  } else {
    throw SpecError("dataset spec: key 'kind' must be 'scenes' or 'patches', got '" + kind + "'");
  }
  std::filesystem::create_directories(dir);
  const std::uint64_t base = derive_seed(seed, kind);
  for (std::size_t i = 0; i < count; ++i) {
    DatasetItem it;
    it.file = item_name(kind, i);
    it.seed = base + i;
    if (kind == "scenes") {
      auto scene = render_scene(scene_spec, it.seed);
      write_png(scene.image, dir / it.file);
      it.annotations = std::move(scene.annotations);
    } else {
      write_png(render_patch(patch_spec, it.seed), dir / it.file);
    }
    it.checksum = file_checksum(dir / it.file);
    m.items.push_back(std::move(it));
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("dataset: cannot write " + (dir / "manifest.json").string());
  out << m.to_json().dump(2) << "\n";
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DatasetError("dataset: no manifest at " + path.string());
  try {
    return DatasetManifest::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DatasetError("dataset: " + path.string() + ": " + e.what());
  }
}

namespace {

Tensor load_item(const std::filesystem::path& dir, const DatasetItem& it) {
  const auto path = dir / it.file;
  if (file_checksum(path) != it.checksum) {
    throw DatasetError("dataset: checksum mismatch for " + path.string());
  }
  return read_png(path);
}

}  // namespace

std::vector<SyntheticScene> load_scenes(const std::filesystem::path& dir,
                                        const DatasetManifest& manifest) {
  if (manifest.kind != "scenes") throw DatasetError("dataset: expected scenes, found " + manifest.kind);
  std::vector<SyntheticScene> out;
  for (const auto& it : manifest.items) out.push_back({load_item(dir, it), it.annotations, it.seed});
  return out;
}

std::vector<Tensor> load_patches(const std::filesystem::path& dir, const DatasetManifest& manifest) {
  if (manifest.kind != "patches") {
    throw DatasetError("dataset: expected patches, found " + manifest.kind);
  }
  std::vector<Tensor> out;
  for (const auto& it : manifest.items) out.push_back(load_item(dir, it));
  return out;
}

}  // namespace advobj
