#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiaxial/error.hpp"
#include "multiaxial/nn/tensor.hpp"

namespace multiaxial {

/// Architecture hyperparameters of one per-axis 2D U-Net.
struct UNetConfig {
  int depth = 6;
  int base_filters = 16;
  int filter_cap = 64;
  int in_channels = 1;
  int classes = 7;
  /// 3 to concatenate (x,y,z) coordinate planes before the last two layers,
  /// 0 to disable spatial input.
  int coord_channels = 3;
  std::uint64_t seed = 0;

  int filters(int level) const {
    const std::int64_t f = static_cast<std::int64_t>(base_filters) << level;
    return static_cast<int>(std::min<std::int64_t>(f, filter_cap));
  }

  void validate() const {
    if (depth < 1 || depth > 8) throw ConfigError("depth must be in 1..8, got " + std::to_string(depth));
    if (256 % (1 << depth) != 0) throw ConfigError("256 is not divisible by 2^depth");
    if (base_filters < 1) throw ConfigError("base_filters must be positive");
    if (filter_cap < base_filters) throw ConfigError("filter_cap must be >= base_filters");
    if (in_channels != 1) throw ConfigError("in_channels must be 1");
    if (classes < 2) throw ConfigError("classes must be >= 2");
    if (coord_channels != 0 && coord_channels != 3) throw ConfigError("coord_channels must be 0 or 3");
  }

  nlohmann::json to_json() const {
    return {{"depth", depth},
            {"base_filters", base_filters},
            {"filter_cap", filter_cap},
            {"in_channels", in_channels},
            {"classes", classes},
            {"coord_channels", coord_channels},
            {"coord_injection", coord_channels ? std::vector<std::string>{"dec0.conv2", "head"}
                                               : std::vector<std::string>{}},
            {"seed", seed}};
  }

  static UNetConfig from_json(const nlohmann::json& j) {
    UNetConfig c;
    try {
      c.depth = j.at("depth").get<int>();
      c.base_filters = j.at("base_filters").get<int>();
      c.filter_cap = j.at("filter_cap").get<int>();
      c.in_channels = j.at("in_channels").get<int>();
      c.classes = j.at("classes").get<int>();
      c.coord_channels = j.at("coord_channels").get<int>();
      c.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed U-Net config: ") + e.what());
    }
    c.validate();
    return c;
  }

  bool operator==(const UNetConfig&) const = default;
};

enum class LayerKind { kConv, kUpConv, kHead };

/// One learnable layer: weight (out, in, k, k) + bias (out).
struct LayerSpec {
  std::string name;
  LayerKind kind;
  std::int64_t in_channels;
  std::int64_t out_channels;
  std::int64_t kernel;

  std::int64_t parameter_count() const {
    return kernel * kernel * in_channels * out_channels + out_channels;
  }
};

/// Layers in parameter order: encoder levels 0..depth-1, decoder levels
/// depth-1..0, then the 1x1 head.
inline std::vector<LayerSpec> layer_manifest(const UNetConfig& cfg) {
  cfg.validate();
  std::vector<LayerSpec> layers;
  std::int64_t c_in = cfg.in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::int64_t f = cfg.filters(l);
    const std::string p = "enc" + std::to_string(l);
    layers.push_back({p + ".conv1", LayerKind::kConv, c_in, f, 3});
    layers.push_back({p + ".conv2", LayerKind::kConv, f, f, 3});
    c_in = f;
  }
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::int64_t f = cfg.filters(l);
    const std::string p = "dec" + std::to_string(l);
    layers.push_back({p + ".up", LayerKind::kUpConv, c_in, f, 2});
    layers.push_back({p + ".conv1", LayerKind::kConv, 2 * f, f, 3});
    layers.push_back({p + ".conv2", LayerKind::kConv, f + (l == 0 ? cfg.coord_channels : 0), f, 3});
    c_in = f;
  }
  layers.push_back({"head", LayerKind::kHead, c_in + cfg.coord_channels, cfg.classes, 1});
  return layers;
}

struct TensorSpec {
  std::string name;
  nn::Shape shape;
};

inline std::vector<TensorSpec> tensor_manifest(const UNetConfig& cfg) {
  std::vector<TensorSpec> out;
  for (const auto& l : layer_manifest(cfg)) {
    out.push_back({l.name + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel}});
    out.push_back({l.name + ".bias", {l.out_channels}});
  }
  return out;
}

/// Closed-form trainable parameter count: sum of k*k*c_in*c_out + c_out.
inline std::int64_t count_parameters(const UNetConfig& cfg) {
  std::int64_t n = 0;
  for (const auto& l : layer_manifest(cfg)) n += l.parameter_count();
  return n;
}

}  // namespace multiaxial
