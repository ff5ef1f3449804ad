#pragma once

// Rule-based anatomical corrections on tissue label volumes, plus cleanup of
// small isolated components. Rules use 6-connectivity; component cleanup
// uses 26-connectivity. Each rule decides from the state before the rule
// runs (no cascading inside a pass).

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "multiaxial/image.hpp"

namespace multiaxial::postprocess {

enum class Connectivity { k6 = 6, k26 = 26 };

struct Component {
  std::uint8_t code = 0;
  std::int64_t size = 0;
  bool touches_border = false;
};

/// Connected components of equal-code voxels. Ids are dense from 1 (0 =
/// voxel not included); members of component id lie contiguously in
/// `members[start[id-1] .. start[id-1]+size)`.
struct ComponentMap {
  Grid3<std::int32_t> id;
  std::vector<Component> components;
  std::vector<std::uint32_t> members;
  std::vector<std::size_t> start;

  const Component& operator[](std::int32_t component_id) const { return components[component_id - 1]; }
};

namespace detail {

inline std::vector<std::array<int, 3>> offsets(Connectivity c) {
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (c == Connectivity::k6 && manhattan != 1) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

template <class F>
void for_each_neighbor(const Index3& dims, std::size_t v, const std::vector<std::array<int, 3>>& offs, F&& f) {
  const auto nx = dims[0], ny = dims[1];
  const std::int64_t i = static_cast<std::int64_t>(v) % nx;
  const std::int64_t j = (static_cast<std::int64_t>(v) / nx) % ny;
  const std::int64_t k = static_cast<std::int64_t>(v) / (nx * ny);
  for (const auto& o : offs) {
    const auto a = i + o[0], b = j + o[1], c = k + o[2];
    if (a < 0 || b < 0 || c < 0 || a >= dims[0] || b >= dims[1] || c >= dims[2]) continue;
    f(static_cast<std::size_t>(a + nx * (b + ny * c)));
  }
}

inline bool on_border(const Index3& dims, std::size_t v) {
  const auto nx = dims[0], ny = dims[1];
  const std::int64_t i = static_cast<std::int64_t>(v) % nx;
  const std::int64_t j = (static_cast<std::int64_t>(v) / nx) % ny;
  const std::int64_t k = static_cast<std::int64_t>(v) / (nx * ny);
  return i == 0 || j == 0 || k == 0 || i == dims[0] - 1 || j == dims[1] - 1 || k == dims[2] - 1;
}

inline bool is_brain(std::uint8_t c) { return c == kWhiteMatter || c == kGrayMatter; }

}  // namespace detail

/// Labels components among voxels whose code satisfies `include`.
inline ComponentMap label_components(const Grid3<std::uint8_t>& labels, Connectivity conn,
                                     const std::function<bool(std::uint8_t)>& include) {
  ComponentMap map;
  map.id = Grid3<std::int32_t>(labels.dims(), 0);
  const auto offs = detail::offsets(conn);
  const auto& dims = labels.dims();
  for (std::size_t seed = 0; seed < labels.size(); ++seed) {
    if (map.id[seed] != 0 || !include(labels[seed])) continue;
    const auto cid = static_cast<std::int32_t>(map.components.size() + 1);
    Component comp{labels[seed], 0, false};
    const std::size_t first = map.members.size();
    map.start.push_back(first);
    map.id[seed] = cid;
    map.members.push_back(static_cast<std::uint32_t>(seed));
    for (std::size_t head = first; head < map.members.size(); ++head) {
      const std::size_t v = map.members[head];
      comp.touches_border = comp.touches_border || detail::on_border(dims, v);
      detail::for_each_neighbor(dims, v, offs, [&](std::size_t u) {
        if (map.id[u] == 0 && labels[u] == comp.code) {
          map.id[u] = cid;
          map.members.push_back(static_cast<std::uint32_t>(u));
        }
      });
    }
    comp.size = static_cast<std::int64_t>(map.members.size() - first);
    map.components.push_back(comp);
  }
  return map;
}

/// Air-cavity components connected to the volume border become background.
inline std::int64_t clear_external_air(Grid3<std::uint8_t>& labels) {
  const auto map = label_components(labels, Connectivity::k6, [](std::uint8_t c) { return c == kAir; });
  std::int64_t changed = 0;
  for (std::size_t c = 0; c < map.components.size(); ++c) {
    if (!map.components[c].touches_border) continue;
    for (std::size_t m = 0; m < static_cast<std::size_t>(map.components[c].size); ++m)
      labels[map.members[map.start[c] + m]] = kBackground;
    changed += map.components[c].size;
  }
  return changed;
}

/// Background components not connected to the volume border become bone.
inline std::int64_t fill_enclosed_background_as_bone(Grid3<std::uint8_t>& labels) {
  const auto map = label_components(labels, Connectivity::k6, [](std::uint8_t c) { return c == kBackground; });
  std::int64_t changed = 0;
  for (std::size_t c = 0; c < map.components.size(); ++c) {
    if (map.components[c].touches_border) continue;
    for (std::size_t m = 0; m < static_cast<std::size_t>(map.components[c].size); ++m)
      labels[map.members[map.start[c] + m]] = kBone;
    changed += map.components[c].size;
  }
  return changed;
}

/// Bone voxels 6-adjacent to white or gray matter become CSF.
inline std::int64_t relabel_bone_touching_brain(Grid3<std::uint8_t>& labels) {
  const auto offs = detail::offsets(Connectivity::k6);
  std::vector<std::size_t> hits;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    if (labels[v] != kBone) continue;
    bool touch = false;
    detail::for_each_neighbor(labels.dims(), v, offs, [&](std::size_t u) { touch = touch || detail::is_brain(labels[u]); });
    if (touch) hits.push_back(v);
  }
  for (auto v : hits) labels[v] = kCsf;
  return static_cast<std::int64_t>(hits.size());
}

/// Relabels non-background 26-connected components smaller than
/// `min_voxels` to the most frequent class among their boundary
/// neighbors (ties to the lowest code). Only neighbors that belong to
/// background or to components of at least `min_voxels` vote, and a class
/// is skipped when taking it would immediately violate an anatomical rule
/// (bone 6-adjacent to brain, border-touching air, background without a
/// 6-adjacent background voxel). Passes repeat until nothing changes; each
/// pass decides from its pre-pass state.
inline std::int64_t remove_small_components(Grid3<std::uint8_t>& labels, std::int64_t min_voxels) {
  if (min_voxels < 1) throw DomainError("min_voxels must be >= 1");
  if (min_voxels == 1) return 0;
  const auto offs26 = detail::offsets(Connectivity::k26);
  const auto offs6 = detail::offsets(Connectivity::k6);
  const auto& dims = labels.dims();
  std::int64_t changed = 0;
  std::vector<std::int32_t> stamp;
  for (;;) {
    const auto map = label_components(labels, Connectivity::k26, [](std::uint8_t c) { return c != kBackground; });
    auto stable = [&](std::size_t u) {
      return labels[u] == kBackground || map[map.id[u]].size >= min_voxels;
    };
    stamp.assign(labels.size(), 0);
    std::vector<std::pair<std::size_t, std::uint8_t>> decisions;
    for (std::size_t c = 0; c < map.components.size(); ++c) {
      const auto& comp = map.components[c];
      if (comp.size >= min_voxels) continue;
      const auto cid = static_cast<std::int32_t>(c + 1);
      std::array<std::int64_t, kNumClasses> votes{};
      bool touches_brain = false, touches_background = false;
      for (std::int64_t m = 0; m < comp.size; ++m) {
        const std::size_t v = map.members[map.start[c] + static_cast<std::size_t>(m)];
        detail::for_each_neighbor(dims, v, offs26, [&](std::size_t u) {
          if (map.id[u] == cid || stamp[u] == cid) return;
          stamp[u] = cid;
          if (stable(u) && labels[u] < kNumClasses) ++votes[labels[u]];
        });
        detail::for_each_neighbor(dims, v, offs6, [&](std::size_t u) {
          touches_brain = touches_brain || detail::is_brain(labels[u]);
          touches_background = touches_background || labels[u] == kBackground;
        });
      }
      std::array<int, kNumClasses> order{};
      for (int i = 0; i < kNumClasses; ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return votes[a] > votes[b]; });
      for (int code : order) {
        if (votes[code] == 0) break;
        if (code == kBone && touches_brain) continue;
        if (code == kAir && comp.touches_border) continue;
        if (code == kBackground && !touches_background) continue;
        decisions.emplace_back(c, static_cast<std::uint8_t>(code));
        break;
      }
    }
    if (decisions.empty()) break;
    for (const auto& [c, code] : decisions) {
      const auto& comp = map.components[c];
      for (std::int64_t m = 0; m < comp.size; ++m) labels[map.members[map.start[c] + static_cast<std::size_t>(m)]] = code;
      changed += comp.size;
    }
  }
  return changed;
}

struct Config {
  std::int64_t min_voxels = 27;
  int max_iterations = 16;
};

struct Report {
  std::int64_t external_air = 0;
  std::int64_t enclosed_background = 0;
  std::int64_t bone_near_brain = 0;
  std::int64_t small_components = 0;
  int iterations = 0;
  bool converged = false;

  std::int64_t total() const { return external_air + enclosed_background + bone_near_brain + small_components; }

  std::string to_text() const {
    std::ostringstream os;
    os << "clear_external_air = " << external_air << "\n"
       << "fill_enclosed_background_as_bone = " << enclosed_background << "\n"
       << "relabel_bone_touching_brain = " << bone_near_brain << "\n"
       << "remove_small_components = " << small_components << "\n"
       << "iterations = " << iterations << "\n"
       << "converged = " << (converged ? "true" : "false") << "\n";
    return os.str();
  }
};

/// Runs clear_external_air, fill_enclosed_background_as_bone,
/// relabel_bone_touching_brain and remove_small_components in that order,
/// repeating the sequence until a full round changes nothing.
inline Report apply_all(Grid3<std::uint8_t>& labels, const Config& cfg = {}) {
  Report r;
  for (r.iterations = 1; r.iterations <= cfg.max_iterations; ++r.iterations) {
    const auto a = clear_external_air(labels);
    const auto b = fill_enclosed_background_as_bone(labels);
    const auto c = relabel_bone_touching_brain(labels);
    const auto d = remove_small_components(labels, cfg.min_voxels);
    r.external_air += a;
    r.enclosed_background += b;
    r.bone_near_brain += c;
    r.small_components += d;
    if (a + b + c + d == 0) {
      r.converged = true;
      return r;
    }
  }
  r.iterations = cfg.max_iterations;
  return r;
}

inline Report apply_all(LabelVolume& labels, const Config& cfg = {}) { return apply_all(labels.grid, cfg); }

/// Counts of voxels/components violating each post-condition of apply_all.
struct Violations {
  std::int64_t bone_near_brain = 0;
  std::int64_t enclosed_background = 0;
  std::int64_t external_air = 0;
  std::int64_t small_components = 0;

  bool none() const { return bone_near_brain + enclosed_background + external_air + small_components == 0; }
};

inline Violations check(const Grid3<std::uint8_t>& labels, std::int64_t min_voxels) {
  Violations v;
  Grid3<std::uint8_t> probe = labels;
  v.bone_near_brain = relabel_bone_touching_brain(probe);
  probe = labels;
  v.enclosed_background = fill_enclosed_background_as_bone(probe);
  probe = labels;
  v.external_air = clear_external_air(probe);
  const auto map = label_components(labels, Connectivity::k26, [](std::uint8_t c) { return c != kBackground; });
  for (const auto& c : map.components) v.small_components += c.size < min_voxels ? 1 : 0;
  return v;
}

}  // namespace multiaxial::postprocess
