#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiaxial/error.hpp"

namespace multiaxial {

using Index3 = std::array<std::int64_t, 3>;
using Affine = Eigen::Matrix4d;

/// Tissue codes used by every label volume in the toolkit.
enum Tissue : std::uint8_t {
  kBackground = 0,
  kAir = 1,
  kWhiteMatter = 2,
  kGrayMatter = 3,
  kCsf = 4,
  kBone = 5,
  kSkin = 6,
};
inline constexpr int kNumClasses = 7;

inline std::int64_t voxel_count(const Index3& d) { return d[0] * d[1] * d[2]; }

/// Dense 3D grid, i fastest (NIfTI storage order).
template <class T>
class Grid3 {
 public:
  Grid3() = default;
  explicit Grid3(Index3 dims, T fill = T{})
      : dims_(dims), data_(static_cast<std::size_t>(checked_count(dims)), fill) {}

  const Index3& dims() const noexcept { return dims_; }
  std::int64_t nx() const noexcept { return dims_[0]; }
  std::int64_t ny() const noexcept { return dims_[1]; }
  std::int64_t nz() const noexcept { return dims_[2]; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return static_cast<std::size_t>(i + dims_[0] * (j + dims_[1] * k));
  }
  bool contains(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return i >= 0 && j >= 0 && k >= 0 && i < dims_[0] && j < dims_[1] && k < dims_[2];
  }

  T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[index(i, j, k)]; }
  const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[index(i, j, k)];
  }
  T& operator[](std::size_t n) { return data_[n]; }
  const T& operator[](std::size_t n) const { return data_[n]; }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool operator==(const Grid3&) const = default;

 private:
  static std::int64_t checked_count(const Index3& d) {
    for (auto n : d)
      if (n <= 0) throw GeometryError("grid dimensions must be positive");
    return voxel_count(d);
  }

  Index3 dims_{0, 0, 0};
  std::vector<T> data_;
};

/// One applied transform, in order of application.
struct ProvenanceStep {
  std::string op;
  nlohmann::json params;
};

/// A 3D grid placed in world space by a voxel-to-world affine (mm).
/// Voxel spacing is always the column norms of the affine's 3x3 part.
template <class T>
struct Image {
  Grid3<T> grid;
  Affine affine = Affine::Identity();
  std::vector<ProvenanceStep> provenance;

  const Index3& dims() const noexcept { return grid.dims(); }

  std::array<double, 3> spacing() const {
    std::array<double, 3> s{};
    for (int a = 0; a < 3; ++a) s[a] = affine.block<3, 1>(0, a).norm();
    return s;
  }
};

using Volume = Image<float>;
using LabelVolume = Image<std::uint8_t>;
using ParcelVolume = Image<std::int32_t>;

inline void require_nonsingular(const Affine& affine) {
  const double det = affine.topLeftCorner<3, 3>().determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12)
    throw GeometryError("affine 3x3 part is singular (det=" + std::to_string(det) + ")");
}

template <class A, class B>
bool same_geometry(const Image<A>& a, const Image<B>& b, double tol = 1e-6) {
  return a.dims() == b.dims() && (a.affine - b.affine).cwiseAbs().maxCoeff() <= tol;
}

template <class A, class B>
void require_same_geometry(const Image<A>& a, const Image<B>& b, const char* what) {
  if (a.dims() != b.dims())
    throw ShapeError(std::string(what) + ": grid dimensions differ (" +
                     std::to_string(a.dims()[0]) + "x" + std::to_string(a.dims()[1]) + "x" +
                     std::to_string(a.dims()[2]) + " vs " + std::to_string(b.dims()[0]) + "x" +
                     std::to_string(b.dims()[1]) + "x" + std::to_string(b.dims()[2]) + ")");
}

/// Converts an intensity volume read from disk into tissue codes.
inline LabelVolume to_labels(const Volume& vol, int max_code = kNumClasses - 1) {
  LabelVolume out;
  out.grid = Grid3<std::uint8_t>(vol.dims());
  out.affine = vol.affine;
  for (std::size_t n = 0; n < vol.grid.size(); ++n) {
    const double v = std::nearbyint(vol.grid[n]);
    if (v < 0 || v > max_code)
      throw RangeError("label value " + std::to_string(vol.grid[n]) + " outside 0.." +
                       std::to_string(max_code));
    out.grid[n] = static_cast<std::uint8_t>(v);
  }
  return out;
}

inline ParcelVolume to_parcels(const Volume& vol) {
  ParcelVolume out;
  out.grid = Grid3<std::int32_t>(vol.dims());
  out.affine = vol.affine;
  for (std::size_t n = 0; n < vol.grid.size(); ++n)
    out.grid[n] = static_cast<std::int32_t>(std::nearbyint(vol.grid[n]));
  return out;
}

template <class T>
Volume to_volume(const Image<T>& img) {
  Volume out;
  out.grid = Grid3<float>(img.dims());
  out.affine = img.affine;
  out.provenance = img.provenance;
  for (std::size_t n = 0; n < img.grid.size(); ++n) out.grid[n] = static_cast<float>(img.grid[n]);
  return out;
}

inline nlohmann::json affine_to_json(const Affine& a) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({a(r, 0), a(r, 1), a(r, 2), a(r, 3)});
  return rows;
}

inline Affine affine_from_json(const nlohmann::json& j) {
  Affine a;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a(r, c) = j.at(r).at(c).get<double>();
  return a;
}

}  // namespace multiaxial
