#include "advobj/bundle.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

namespace advobj {

namespace {

static_assert(std::endian::native == std::endian::little,
              "bundle blobs are written in host order; big-endian hosts need a byte swap");

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

nlohmann::json manifest_json(const ModelBundle& b, std::size_t blob_bytes, std::uint32_t crc) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : b.tensors) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  return {{"format", "advobj-bundle"},
          {"version", b.version},
          {"kind", b.kind},
          {"architecture", b.architecture},
          {"class_names", b.class_names},
          {"tensors", std::move(tensors)},
          {"blob_bytes", blob_bytes},
          {"checksum", "crc32:" + hex32(crc)},
          {"metadata", b.metadata}};
}

ModelBundle bundle_from_network(const Network& net, std::string kind, nlohmann::json arch,
                                std::vector<std::string> class_names, nlohmann::json metadata) {
  ModelBundle b;
  b.kind = std::move(kind);
  b.architecture = std::move(arch);
  b.architecture["network"] = to_json(net.spec());
  b.class_names = std::move(class_names);
  b.metadata = metadata.is_null() ? nlohmann::json::object() : std::move(metadata);
  for (std::size_t i = 0; i < net.param_count(); ++i) {
    const Tensor& p = net.param(i);
    b.tensors.push_back({"param" + std::to_string(i), p.shape()});
    for (double v : p.data()) b.weights.push_back(static_cast<float>(v));
  }
  return b;
}

Network network_from_bundle(const ModelBundle& b) {
  NetworkSpec spec = network_spec_from_json(b.architecture.at("network"));
  std::vector<Tensor> params;
  std::size_t offset = 0;
  for (const auto& entry : b.tensors) {
    const std::size_t n = shape_numel(entry.shape);
    if (offset + n > b.weights.size()) {
      throw BundleFormatError("bundle: tensor '" + entry.name + "' exceeds weight blob");
    }
    std::vector<double> data(b.weights.begin() + offset, b.weights.begin() + offset + n);
    params.emplace_back(entry.shape, std::move(data));
    offset += n;
  }
  if (offset != b.weights.size()) throw BundleFormatError("bundle: unused weights in blob");
  return Network(std::move(spec), std::move(params));
}

}  // namespace

bool operator==(const ModelBundle& a, const ModelBundle& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].name != b.tensors[i].name || a.tensors[i].shape != b.tensors[i].shape)
      return false;
  }
  return a.version == b.version && a.kind == b.kind && a.architecture == b.architecture &&
         a.class_names == b.class_names && a.metadata == b.metadata &&
         a.weights.size() == b.weights.size() &&
         std::memcmp(a.weights.data(), b.weights.data(), a.weights.size() * sizeof(float)) == 0;
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::string serialize_bundle(const ModelBundle& bundle) {
  std::size_t expected = 0;
  for (const auto& t : bundle.tensors) expected += shape_numel(t.shape);
  if (expected != bundle.weights.size()) {
    throw BundleFormatError("bundle: tensor table declares " + std::to_string(expected) +
                            " weights, blob holds " + std::to_string(bundle.weights.size()));
  }
  std::string blob(bundle.weights.size() * sizeof(float), '\0');
  std::memcpy(blob.data(), bundle.weights.data(), blob.size());
  const std::string manifest = manifest_json(bundle, blob.size(), crc32_of(blob)).dump(2) + "\n";
  return "advobj-bundle " + std::to_string(manifest.size()) + " " + hex32(crc32_of(manifest)) +
         "\n" + manifest + blob;
}

ModelBundle parse_bundle(const std::string& bytes) {
  const auto eol = bytes.find('\n');
  if (eol == std::string::npos) throw TruncatedBundleError("bundle: missing header line");
  std::istringstream header(bytes.substr(0, eol));
  std::string magic, crc_hex;
  std::size_t manifest_bytes = 0;
  if (!(header >> magic >> manifest_bytes >> crc_hex) || magic != "advobj-bundle") {
    throw BundleFormatError("bundle: bad header line");
  }
  const std::size_t manifest_begin = eol + 1;
  if (bytes.size() < manifest_begin + manifest_bytes) {
    throw TruncatedBundleError("bundle: manifest truncated (" +
                               std::to_string(bytes.size() - manifest_begin) + " of " +
                               std::to_string(manifest_bytes) + " bytes)");
  }
  const std::string_view manifest(bytes.data() + manifest_begin, manifest_bytes);
  if (hex32(crc32_of(manifest)) != crc_hex) {
    throw ChecksumError("bundle: manifest checksum mismatch");
  }
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw BundleFormatError(std::string("bundle: manifest is not valid JSON: ") + e.what());
  }
  ModelBundle b;
  try {
    b.version = m.at("version").get<int>();
    if (b.version != kBundleVersion) {
      throw UnsupportedVersionError("bundle: unsupported manifest version " +
                                    std::to_string(b.version) + " (supported: " +
                                    std::to_string(kBundleVersion) + ")");
    }
    b.kind = m.at("kind").get<std::string>();
    b.architecture = m.at("architecture");
    b.class_names = m.at("class_names").get<std::vector<std::string>>();
    b.metadata = m.value("metadata", nlohmann::json::object());
    for (const auto& t : m.at("tensors")) {
      b.tensors.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>()});
    }
    const std::size_t blob_bytes = m.at("blob_bytes").get<std::size_t>();
    const std::string checksum = m.at("checksum").get<std::string>();
    const std::size_t blob_begin = manifest_begin + manifest_bytes;
    const std::size_t available = bytes.size() - blob_begin;
    if (available < blob_bytes) {
      throw TruncatedBundleError("bundle: weight blob truncated (" + std::to_string(available) +
                                 " of " + std::to_string(blob_bytes) + " bytes)");
    }
    if (available > blob_bytes) throw BundleFormatError("bundle: trailing bytes after blob");
    const std::string_view blob(bytes.data() + blob_begin, blob_bytes);
    if (checksum != "crc32:" + hex32(crc32_of(blob))) {
      throw ChecksumError("bundle: weight blob checksum mismatch (manifest says " + checksum +
                          ", blob is crc32:" + hex32(crc32_of(blob)) + ")");
    }
    if (blob_bytes % sizeof(float) != 0) throw BundleFormatError("bundle: ragged blob");
    b.weights.resize(blob_bytes / sizeof(float));
    std::memcpy(b.weights.data(), blob.data(), blob_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw BundleFormatError(std::string("bundle: malformed manifest: ") + e.what());
  }
  std::size_t expected = 0;
  for (const auto& t : b.tensors) expected += shape_numel(t.shape);
  if (expected != b.weights.size()) {
    throw BundleFormatError("bundle: tensor table does not match blob size");
  }
  return b;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
  const std::string bytes = serialize_bundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BundleError("bundle: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw BundleError("bundle: write failed for " + path.string());
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BundleError("bundle: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_bundle(ss.str());
}

ModelBundle to_bundle(const Generator& generator, nlohmann::json metadata) {
  nlohmann::json arch{{"latent_dim", generator.latent_dim()},
                      {"patch_shape", generator.patch_shape()}};
  return bundle_from_network(generator.network(), "generator", std::move(arch), {},
                             std::move(metadata));
}

ModelBundle to_bundle(const Detector& detector, nlohmann::json metadata) {
  nlohmann::json arch{{"input_shape", detector.input_shape()},
                      {"anchor_stride", detector.anchors().stride},
                      {"anchor_sizes", detector.anchors().sizes}};
  return bundle_from_network(detector.network(), "detector", std::move(arch),
                             detector.class_names(), std::move(metadata));
}

Generator generator_from_bundle(const ModelBundle& bundle) {
  if (bundle.kind != "generator") {
    throw BundleFormatError("bundle: expected a generator, found '" + bundle.kind + "'");
  }
  try {
    return Generator(network_from_bundle(bundle));
  } catch (const nlohmann::json::exception& e) {
    throw BundleFormatError(std::string("bundle: bad generator architecture: ") + e.what());
  }
}

Detector detector_from_bundle(const ModelBundle& bundle) {
  if (bundle.kind != "detector") {
    throw BundleFormatError("bundle: expected a detector, found '" + bundle.kind + "'");
  }
  try {
    AnchorSpec anchors;
    anchors.stride = bundle.architecture.at("anchor_stride").get<std::size_t>();
    anchors.sizes = bundle.architecture.at("anchor_sizes").get<std::vector<double>>();
    return Detector(network_from_bundle(bundle), std::move(anchors), bundle.class_names);
  } catch (const nlohmann::json::exception& e) {
    throw BundleFormatError(std::string("bundle: bad detector architecture: ") + e.what());
  }
}

Generator load_generator(const std::filesystem::path& path) {
  return generator_from_bundle(load_bundle(path));
}

Detector load_detector(const std::filesystem::path& path) {
  return detector_from_bundle(load_bundle(path));
}

Network quantize_to_float32(const Network& network) {
  std::vector<Tensor> params = network.params();
  for (auto& p : params)
    for (double& v : p.data()) v = static_cast<double>(static_cast<float>(v));
  return Network(network.spec(), std::move(params));
}

}  // namespace advobj
