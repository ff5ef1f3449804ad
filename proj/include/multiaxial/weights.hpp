#pragma once

// "MAXW" weight container:
//   bytes 0..3   magic "MAXW"
//   bytes 4..7   u32 format version (1), little-endian
//   bytes 8..15  u64 metadata length N, little-endian
//   N bytes      UTF-8 JSON metadata: {"kind", kind-specific fields,
//                "tensors": [{"name", "shape", "offset"}...]}
//   payload      contiguous little-endian float32 tensors; "offset" is the
//                byte offset of each tensor from the start of the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiaxial/error.hpp"
#include "multiaxial/nn/tensor.hpp"
#include "multiaxial/unet_config.hpp"

namespace multiaxial {

inline constexpr char kWeightsMagic[4] = {'M', 'A', 'X', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

struct NamedTensor {
  std::string name;
  nn::Shape shape;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

struct ModelWeights {
  std::string kind;            // "unet" or "consensus"
  nlohmann::json metadata;     // config echo and kind-specific fields
  std::vector<NamedTensor> tensors;
  std::uint32_t version = kWeightsVersion;

  std::int64_t element_count() const {
    std::int64_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::int64_t>(t.data.size());
    return n;
  }

  const NamedTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw CompatibilityError("weights have no tensor named " + name);
  }
};

inline const std::vector<std::string>& consensus_channel_order() {
  static const std::vector<std::string> order{"axial", "coronal", "sagittal"};
  return order;
}

/// Tensor names and shapes that a container of the given kind must hold.
inline std::vector<TensorSpec> expected_tensors(const std::string& kind, const nlohmann::json& metadata) {
  std::vector<TensorSpec> expected;
  if (kind == "unet") {
    if (!metadata.contains("config")) throw FormatError("unet weights lack a config");
    return tensor_manifest(UNetConfig::from_json(metadata.at("config")));
  }
  if (kind == "consensus") {
    const int classes = metadata.value("classes", 7);
    const int models = metadata.value("models", 3);
    if (metadata.value("channel_order", std::vector<std::string>{}) != consensus_channel_order())
      throw CompatibilityError("consensus layer channel order must be axial, coronal, sagittal");
    expected.push_back({"consensus.weight", {classes, models * classes, 1, 1, 1}});
    if (metadata.value("has_bias", false)) expected.push_back({"consensus.bias", {classes}});
    return expected;
  }
  throw FormatError("unknown weight kind '" + kind + "'");
}

/// Rejects on the first tensor whose name or shape differs from the spec.
inline void check_manifest(const std::vector<TensorSpec>& expected, const std::vector<TensorSpec>& actual) {
  if (actual.size() != expected.size())
    throw CompatibilityError("expected " + std::to_string(expected.size()) + " tensors, container has " +
                             std::to_string(actual.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (actual[i].name != expected[i].name)
      throw CompatibilityError("tensor #" + std::to_string(i) + " is '" + actual[i].name + "', expected '" +
                               expected[i].name + "'");
    if (actual[i].shape != expected[i].shape)
      throw CompatibilityError("tensor '" + actual[i].name + "' has shape " + nn::shape_string(actual[i].shape) +
                               ", expected " + nn::shape_string(expected[i].shape));
  }
}

inline void validate_weights(const ModelWeights& w) {
  std::vector<TensorSpec> actual;
  for (const auto& t : w.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != nn::element_count(t.shape))
      throw CompatibilityError("tensor '" + t.name + "' payload does not match its shape");
    actual.push_back({t.name, t.shape});
  }
  check_manifest(expected_tensors(w.kind, w.metadata), actual);
}

namespace detail {

template <class U>
void put_le(std::vector<unsigned char>& out, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

template <class U>
U get_le(const unsigned char* p) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

}  // namespace detail

inline std::vector<unsigned char> serialize_weights(const ModelWeights& w) {
  validate_weights(w);
  nlohmann::json meta = w.metadata;
  meta["kind"] = w.kind;
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : w.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data.size() * sizeof(float);
  }
  meta["tensors"] = manifest;
  const std::string text = meta.dump();

  std::vector<unsigned char> out(kWeightsMagic, kWeightsMagic + 4);
  detail::put_le<std::uint32_t>(out, w.version);
  detail::put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& t : w.tensors)
    for (float f : t.data) detail::put_le<float>(out, f);
  return out;
}

inline ModelWeights deserialize_weights(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16) throw LengthMismatchError("weight container truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kWeightsMagic, 4) != 0) throw FormatError("bad weight container magic");
  ModelWeights w;
  w.version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (w.version != kWeightsVersion)
    throw FormatError("unsupported weight container version " + std::to_string(w.version));
  const auto meta_len = detail::get_le<std::uint64_t>(bytes.data() + 8);
  if (meta_len > bytes.size() - 16)
    throw LengthMismatchError("weight container truncated in metadata: need " + std::to_string(meta_len) +
                              " bytes, have " + std::to_string(bytes.size() - 16));
  try {
    w.metadata = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("weight metadata is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 16 + meta_len;
  std::vector<TensorSpec> specs;
  std::vector<std::uint64_t> offsets;
  try {
    w.kind = w.metadata.at("kind").get<std::string>();
    for (const auto& entry : w.metadata.at("tensors")) {
      specs.push_back({entry.at("name").get<std::string>(), entry.at("shape").get<nn::Shape>()});
      offsets.push_back(entry.at("offset").get<std::uint64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed weight manifest: ") + e.what());
  }
  w.metadata.erase("tensors");
  w.metadata.erase("kind");
  check_manifest(expected_tensors(w.kind, w.metadata), specs);
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (offsets[i] != expected_offset) throw FormatError("tensor '" + specs[i].name + "' has a non-contiguous offset");
    expected_offset += static_cast<std::uint64_t>(nn::element_count(specs[i].shape)) * 4;
  }

  std::uint64_t offset = 0;
  for (auto& s : specs) {
    const auto n = static_cast<std::uint64_t>(nn::element_count(s.shape));
    if (payload + offset + n * 4 > bytes.size())
      throw LengthMismatchError("weight container truncated in tensor '" + s.name + "': need " +
                                std::to_string(payload + offset + n * 4) + " bytes, have " +
                                std::to_string(bytes.size()));
    NamedTensor t{s.name, s.shape, std::vector<float>(n)};
    const unsigned char* p = bytes.data() + payload + offset;
    for (std::uint64_t i = 0; i < n; ++i) t.data[i] = detail::get_le<float>(p + 4 * i);
    offset += n * 4;
    w.tensors.push_back(std::move(t));
  }
  if (payload + offset != bytes.size())
    throw LengthMismatchError("weight container has " + std::to_string(bytes.size() - payload - offset) +
                              " trailing bytes");
  return w;
}

inline void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(w);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write error in " + path.string());
}

inline ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace multiaxial
