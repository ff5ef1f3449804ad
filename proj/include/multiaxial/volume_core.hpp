#pragma once

// Conformance of arbitrary head MRI volumes to the network's canonical
// space (1 mm isotropic, RAS, 256^3, p95-normalized) and the inverse
// mapping used to bring label maps back onto the native grid.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "json.hpp"
#include "multiaxial/error.hpp"
#include "multiaxial/image.hpp"
#include "multiaxial/nifti_io.hpp"

namespace multiaxial {

inline constexpr std::int64_t kConformSize = 256;

enum class Interp { kLinear, kNearest };

/// Linear-interpolation percentile at fractional rank p*(n-1).
inline double percentile(std::span<const float> values, double p) {
  if (values.empty()) throw DomainError("percentile of an empty set");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("percentile fraction outside [0,1]");
  std::vector<float> v(values.begin(), values.end());
  const double rank = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (frac == 0.0 || lo + 1 >= v.size()) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + frac * (b - a);
}

inline double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw DomainError("percentile of an empty set");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("percentile fraction outside [0,1]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double rank = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  if (frac == 0.0 || lo + 1 >= v.size()) return v[lo];
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

/// Everything needed to map conformed-space results back to the native grid.
struct ConformRecord {
  Index3 original_dims{0, 0, 0};
  Affine original_affine = Affine::Identity();
  std::array<double, 3> resample_factor{1, 1, 1};  // native spacing / target spacing
  bool resample_skipped = true;
  Index3 resampled_dims{0, 0, 0};
  nifti::Orientation orientation;
  Index3 reoriented_dims{0, 0, 0};
  std::array<std::int64_t, 3> shift{0, 0, 0};  // conformed index = reoriented index + shift
  Index3 conformed_dims{0, 0, 0};
  double p95 = 1.0;
  bool complete = false;

  nlohmann::json to_json() const {
    return {{"original_dims", original_dims},
            {"original_affine", affine_to_json(original_affine)},
            {"resample_factor", resample_factor},
            {"resample_skipped", resample_skipped},
            {"resampled_dims", resampled_dims},
            {"permutation", orientation.permutation},
            {"flip_sign", orientation.sign},
            {"reoriented_dims", reoriented_dims},
            {"shift", shift},
            {"conformed_dims", conformed_dims},
            {"p95", p95},
            {"complete", complete}};
  }

  static ConformRecord from_json(const nlohmann::json& j) {
    ConformRecord r;
    try {
      r.original_dims = j.at("original_dims").get<Index3>();
      r.original_affine = affine_from_json(j.at("original_affine"));
      r.resample_factor = j.at("resample_factor").get<std::array<double, 3>>();
      r.resample_skipped = j.at("resample_skipped").get<bool>();
      r.resampled_dims = j.at("resampled_dims").get<Index3>();
      r.orientation.permutation = j.at("permutation").get<std::array<int, 3>>();
      r.orientation.sign = j.at("flip_sign").get<std::array<int, 3>>();
      r.reoriented_dims = j.at("reoriented_dims").get<Index3>();
      r.shift = j.at("shift").get<std::array<std::int64_t, 3>>();
      r.conformed_dims = j.at("conformed_dims").get<Index3>();
      r.p95 = j.at("p95").get<double>();
      r.complete = j.at("complete").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw RecordError(std::string("malformed conform record: ") + e.what());
    }
    return r;
  }
};

namespace detail {

inline std::int64_t resampled_extent(std::int64_t n, double factor) {
  return static_cast<std::int64_t>(std::floor(static_cast<double>(n - 1) * factor + 1e-6)) + 1;
}

}  // namespace detail

/// Resamples to isotropic `target` mm along the voxel axes. Voxel 0 keeps
/// its world position; the grid never extends past the last native voxel
/// center. Returns the input unchanged when it is already at the target
/// spacing (within 1e-6 mm).
template <class T>
Image<T> resample_isotropic(const Image<T>& img, double target, Interp mode,
                            ConformRecord* record = nullptr) {
  const auto spacing = img.spacing();
  for (double s : spacing)
    if (!(s > 0) || !std::isfinite(s)) throw GeometryError("nonpositive voxel spacing");
  if (!(target > 0)) throw GeometryError("nonpositive target spacing");
  bool skip = true;
  for (double s : spacing) skip = skip && std::abs(s - target) <= 1e-6;
  if (record) record->resample_skipped = skip;
  if (skip) {
    if (record) {
      record->resample_factor = {1, 1, 1};
      record->resampled_dims = img.dims();
    }
    Image<T> out = img;
    out.provenance.push_back({"resample", {{"skipped", true}, {"target_mm", target}}});
    return out;
  }

  const Index3 in = img.dims();
  std::array<double, 3> factor{};  // output voxels per input voxel
  Index3 dims{};
  for (int a = 0; a < 3; ++a) {
    factor[a] = spacing[a] / target;
    dims[a] = detail::resampled_extent(in[a], factor[a]);
  }

  Image<T> out;
  out.grid = Grid3<T>(dims);
  out.affine = img.affine;
  for (int a = 0; a < 3; ++a) out.affine.template block<3, 1>(0, a) /= factor[a];
  out.provenance = img.provenance;
  out.provenance.push_back({"resample",
                            {{"skipped", false},
                             {"target_mm", target},
                             {"factor", factor},
                             {"mode", mode == Interp::kLinear ? "linear" : "nearest"}}});

  // Per-axis source positions and weights.
  std::array<std::vector<std::int64_t>, 3> i0, i1;
  std::array<std::vector<double>, 3> w;
  for (int a = 0; a < 3; ++a) {
    i0[a].resize(dims[a]);
    i1[a].resize(dims[a]);
    w[a].resize(dims[a]);
    for (std::int64_t o = 0; o < dims[a]; ++o) {
      const double x = std::clamp(static_cast<double>(o) / factor[a], 0.0, double(in[a] - 1));
      if (mode == Interp::kNearest) {
        i0[a][o] = i1[a][o] = std::min<std::int64_t>(std::int64_t(std::floor(x + 0.5)), in[a] - 1);
        w[a][o] = 0;
      } else {
        const auto f = std::min<std::int64_t>(std::int64_t(std::floor(x)), in[a] - 1);
        i0[a][o] = f;
        i1[a][o] = std::min<std::int64_t>(f + 1, in[a] - 1);
        w[a][o] = x - static_cast<double>(f);
      }
    }
  }

  const auto& g = img.grid;
  for (std::int64_t k = 0; k < dims[2]; ++k)
    for (std::int64_t j = 0; j < dims[1]; ++j)
      for (std::int64_t i = 0; i < dims[0]; ++i) {
        if (mode == Interp::kNearest) {
          out.grid(i, j, k) = g(i0[0][i], i0[1][j], i0[2][k]);
          continue;
        }
        const double wx = w[0][i], wy = w[1][j], wz = w[2][k];
        const auto x0 = i0[0][i], x1 = i1[0][i], y0 = i0[1][j], y1 = i1[1][j], z0 = i0[2][k],
                   z1 = i1[2][k];
        const double c00 = (1 - wx) * g(x0, y0, z0) + wx * g(x1, y0, z0);
        const double c10 = (1 - wx) * g(x0, y1, z0) + wx * g(x1, y1, z0);
        const double c01 = (1 - wx) * g(x0, y0, z1) + wx * g(x1, y0, z1);
        const double c11 = (1 - wx) * g(x0, y1, z1) + wx * g(x1, y1, z1);
        const double c0 = (1 - wy) * c00 + wy * c10;
        const double c1 = (1 - wy) * c01 + wy * c11;
        out.grid(i, j, k) = static_cast<T>((1 - wz) * c0 + wz * c1);
      }
  if (record) {
    record->resample_factor = factor;
    record->resampled_dims = dims;
  }
  return out;
}

/// Permutes/flips voxel axes so that axis 0 points R, 1 points A, 2 points
/// S. Oblique affines are snapped to the closest axis assignment; no
/// interpolation happens.
template <class T>
Image<T> reorient_to_ras(const Image<T>& img, ConformRecord* record = nullptr) {
  const nifti::Orientation o = nifti::orientation_codes(img.affine);
  const Index3 in = img.dims();
  if (record) {
    record->orientation = o;
  }
  if (o.is_identity()) {
    if (record) record->reoriented_dims = in;
    Image<T> out = img;
    out.provenance.push_back({"reorient", {{"identity", true}}});
    return out;
  }
  Index3 dims{};
  for (int a = 0; a < 3; ++a) dims[o.permutation[a]] = in[a];

  // old_index = P * new_index + offset
  Affine p = Affine::Zero();
  p(3, 3) = 1;
  for (int a = 0; a < 3; ++a) {
    const int w = o.permutation[a];
    if (o.sign[a] > 0) {
      p(a, w) = 1;
    } else {
      p(a, w) = -1;
      p(a, 3) = static_cast<double>(in[a] - 1);
    }
  }

  Image<T> out;
  out.grid = Grid3<T>(dims);
  out.affine = img.affine * p;
  out.provenance = img.provenance;
  out.provenance.push_back({"reorient",
                            {{"identity", false},
                             {"permutation", o.permutation},
                             {"sign", o.sign},
                             {"from", nifti::orientation_string(o)}}});
  std::array<std::int64_t, 3> n{}, old{};
  for (n[2] = 0; n[2] < dims[2]; ++n[2])
    for (n[1] = 0; n[1] < dims[1]; ++n[1])
      for (n[0] = 0; n[0] < dims[0]; ++n[0]) {
        for (int a = 0; a < 3; ++a) {
          const auto v = n[o.permutation[a]];
          old[a] = o.sign[a] > 0 ? v : in[a] - 1 - v;
        }
        out.grid(n[0], n[1], n[2]) = img.grid(old[0], old[1], old[2]);
      }
  if (record) record->reoriented_dims = dims;
  return out;
}

/// Pads (value 0) or crops each axis to `size`, centered with
/// floor((size-n)/2) / floor((n-size)/2) offsets.
template <class T>
Image<T> pad_crop(const Image<T>& img, const std::array<std::int64_t, 3>& shift, const Index3& dims,
                  T fill = T{}) {
  Image<T> out;
  out.grid = Grid3<T>(dims, fill);
  Affine t = Affine::Identity();
  for (int a = 0; a < 3; ++a) t(a, 3) = -static_cast<double>(shift[a]);
  out.affine = img.affine * t;
  out.provenance = img.provenance;
  const Index3 in = img.dims();
  for (std::int64_t k = 0; k < dims[2]; ++k) {
    const auto ks = k - shift[2];
    if (ks < 0 || ks >= in[2]) continue;
    for (std::int64_t j = 0; j < dims[1]; ++j) {
      const auto js = j - shift[1];
      if (js < 0 || js >= in[1]) continue;
      for (std::int64_t i = 0; i < dims[0]; ++i) {
        const auto is = i - shift[0];
        if (is < 0 || is >= in[0]) continue;
        out.grid(i, j, k) = img.grid(is, js, ks);
      }
    }
  }
  return out;
}

inline std::array<std::int64_t, 3> centering_shift(const Index3& in, std::int64_t size) {
  std::array<std::int64_t, 3> shift{};
  for (int a = 0; a < 3; ++a)
    shift[a] = in[a] <= size ? (size - in[a]) / 2 : -((in[a] - size) / 2);
  return shift;
}

template <class T>
Image<T> conform_256(const Image<T>& img, ConformRecord* record = nullptr) {
  const Index3 target{kConformSize, kConformSize, kConformSize};
  const auto shift = centering_shift(img.dims(), kConformSize);
  if (record) {
    record->shift = shift;
    record->conformed_dims = target;
  }
  if (img.dims() == target) {
    Image<T> out = img;
    out.provenance.push_back({"conform", {{"identity", true}}});
    return out;
  }
  Image<T> out = pad_crop(img, shift, target);
  out.provenance.push_back({"conform", {{"identity", false}, {"shift", shift}}});
  return out;
}

/// Divides by the 95th percentile of all voxels. A volume whose p95 is
/// already 1 (within a few ulp) is returned unchanged.
inline Volume normalize_intensity(const Volume& vol, ConformRecord* record = nullptr) {
  const double p95 = percentile(std::span<const float>(vol.grid.values()), 0.95);
  if (!(p95 > 0) || !std::isfinite(p95))
    throw DegenerateImageError("95th percentile is " + std::to_string(p95) + "; cannot normalize");
  Volume out = vol;
  if (record) record->p95 = p95;
  const bool already = std::abs(p95 - 1.0) <= 4 * std::numeric_limits<float>::epsilon();
  if (!already) {
    for (auto& v : out.grid.values()) v = static_cast<float>(static_cast<double>(v) / p95);
  }
  out.provenance.push_back({"normalize", {{"p95", p95}, {"applied", !already}}});
  return out;
}

struct Conformed {
  Volume volume;
  ConformRecord record;
};

/// resample -> reorient -> pad/crop -> normalize.
inline Conformed conform(const Volume& raw) {
  require_nonsingular(raw.affine);
  Conformed c;
  c.record.original_dims = raw.dims();
  c.record.original_affine = raw.affine;
  Volume v = resample_isotropic(raw, 1.0, Interp::kLinear, &c.record);
  v = reorient_to_ras(v, &c.record);
  v = conform_256(v, &c.record);
  c.volume = normalize_intensity(v, &c.record);
  c.record.complete = true;
  return c;
}

/// Applies the geometric part of a conform record to a label volume on the
/// native grid (nearest-neighbor), yielding labels in conformed space.
template <class T>
Image<T> conform_labels(const Image<T>& labels, ConformRecord* record = nullptr) {
  ConformRecord local;
  ConformRecord& r = record ? *record : local;
  r.original_dims = labels.dims();
  r.original_affine = labels.affine;
  Image<T> v = resample_isotropic(labels, 1.0, Interp::kNearest, &r);
  v = reorient_to_ras(v, &r);
  v = conform_256(v, &r);
  r.complete = true;
  return v;
}

inline void validate_record(const ConformRecord& r) {
  if (!r.complete) throw RecordError("conform record is incomplete");
  for (int a = 0; a < 3; ++a) {
    if (r.original_dims[a] <= 0 || r.resampled_dims[a] <= 0 || r.reoriented_dims[a] <= 0 ||
        r.conformed_dims[a] <= 0)
      throw RecordError("conform record has nonpositive dimensions");
    if (!(r.resample_factor[a] > 0)) throw RecordError("conform record has nonpositive resample factor");
    if (r.resample_skipped && r.resampled_dims[a] != r.original_dims[a])
      throw RecordError("skipped resample but dimensions changed");
    if (!r.resample_skipped &&
        r.resampled_dims[a] != detail::resampled_extent(r.original_dims[a], r.resample_factor[a]))
      throw RecordError("resampled dimensions inconsistent with resample factor");
  }
  std::array<bool, 3> seen{};
  for (int a = 0; a < 3; ++a) {
    const int w = r.orientation.permutation[a];
    if (w < 0 || w > 2 || seen[w] || std::abs(r.orientation.sign[a]) != 1)
      throw RecordError("conform record permutation is not a signed permutation");
    seen[w] = true;
    if (r.reoriented_dims[w] != r.resampled_dims[a])
      throw RecordError("reoriented dimensions inconsistent with permutation");
  }
}

/// Maps conformed-space labels back onto the native grid: undo pad/crop,
/// undo the axis permutation/flips, then nearest-neighbor resample.
template <class T>
Image<T> restore_native(const Image<T>& labels, const ConformRecord& r) {
  validate_record(r);
  if (labels.dims() != r.conformed_dims) throw RecordError("label dimensions do not match conform record");

  // Un-pad/crop back to the reoriented grid.
  std::array<std::int64_t, 3> unshift{};
  for (int a = 0; a < 3; ++a) unshift[a] = -r.shift[a];
  const Image<T> reoriented = pad_crop(labels, unshift, r.reoriented_dims);

  // Undo the permutation/flips onto the resampled grid.
  Grid3<T> resampled(r.resampled_dims);
  const auto& o = r.orientation;
  std::array<std::int64_t, 3> old{}, n{};
  for (old[2] = 0; old[2] < r.resampled_dims[2]; ++old[2])
    for (old[1] = 0; old[1] < r.resampled_dims[1]; ++old[1])
      for (old[0] = 0; old[0] < r.resampled_dims[0]; ++old[0]) {
        for (int a = 0; a < 3; ++a)
          n[o.permutation[a]] = o.sign[a] > 0 ? old[a] : r.resampled_dims[a] - 1 - old[a];
        resampled(old[0], old[1], old[2]) = reoriented.grid(n[0], n[1], n[2]);
      }

  Image<T> out;
  out.affine = r.original_affine;
  if (r.resample_skipped) {
    out.grid = std::move(resampled);
  } else {
    out.grid = Grid3<T>(r.original_dims);
    std::array<std::vector<std::int64_t>, 3> map;
    for (int a = 0; a < 3; ++a) {
      map[a].resize(r.original_dims[a]);
      for (std::int64_t i = 0; i < r.original_dims[a]; ++i) {
        const auto x = static_cast<std::int64_t>(std::floor(static_cast<double>(i) * r.resample_factor[a] + 0.5));
        map[a][i] = std::clamp<std::int64_t>(x, 0, r.resampled_dims[a] - 1);
      }
    }
    for (std::int64_t k = 0; k < r.original_dims[2]; ++k)
      for (std::int64_t j = 0; j < r.original_dims[1]; ++j)
        for (std::int64_t i = 0; i < r.original_dims[0]; ++i)
          out.grid(i, j, k) = resampled(map[0][i], map[1][j], map[2][k]);
  }
  out.provenance = labels.provenance;
  out.provenance.push_back({"restore_native", {{"dims", r.original_dims}}});
  return out;
}

}  // namespace multiaxial
