#pragma once

// Synthetic nested-shell head: ellipsoidal skin, bone, CSF, gray and white
// matter layers, and an anterior air sinus wrapped in bone and then CSF so
// it never touches brain tissue. The intensity image adds Gaussian noise to
// a per-tissue mean.

#include <array>
#include <cmath>
#include <random>

#include "multiaxial/image.hpp"
#include "multiaxial/nn/tensor.hpp"

namespace multiaxial {

struct PhantomSpec {
  Index3 dims{180, 210, 190};
  std::array<double, 3> center{90, 105, 95};   // voxel units
  std::array<double, 3> radii{72, 88, 78};     // outer skin surface, mm
  double skin = 5, bone = 7, csf = 3, gray = 4; // shell thickness, mm
  std::array<double, 3> sinus_radii{18, 9, 12};
  double sinus_wall = 3;                       // bone, then CSF, around the sinus, mm
  double sinus_height = -25;                   // z offset of the sinus from the center
  /// Mean intensity per tissue code.
  std::array<float, kNumClasses> intensity{0, 12, 100, 65, 30, 20, 80};
  double noise_sigma = 2;
  bool lps = false;  // store with an LPS affine instead of RAS
  std::uint64_t seed = 0;

  /// Copy with center and radii jittered by up to `mm` from `rng`.
  PhantomSpec jittered(std::mt19937_64& rng, double mm, std::uint64_t new_seed) const {
    PhantomSpec s = *this;
    for (int a = 0; a < 3; ++a) {
      s.center[a] += nn::uniform(rng, -mm, mm);
      s.radii[a] += nn::uniform(rng, -mm, mm);
    }
    s.seed = new_seed;
    return s;
  }
};

struct Phantom {
  Volume image;
  LabelVolume labels;
};

inline Phantom make_phantom(const PhantomSpec& s) {
  Phantom p;
  p.labels.grid = Grid3<std::uint8_t>(s.dims);
  p.image.grid = Grid3<float>(s.dims);
  Affine a = Affine::Identity();
  if (s.lps) {
    a(0, 0) = -1;
    a(1, 1) = -1;
    a(0, 3) = static_cast<double>(s.dims[0] - 1);
    a(1, 3) = static_cast<double>(s.dims[1] - 1);
  }
  a(0, 3) -= s.center[0];
  a(1, 3) -= s.center[1];
  a(2, 3) -= s.center[2];
  p.labels.affine = p.image.affine = a;

  const std::array<double, 4> depth{s.skin, s.skin + s.bone, s.skin + s.bone + s.csf,
                                    s.skin + s.bone + s.csf + s.gray};
  const std::array<std::uint8_t, 5> shell{kSkin, kBone, kCsf, kGrayMatter, kWhiteMatter};
  auto inside = [&](double x, double y, double z, double shrink) {
    const double rx = s.radii[0] - shrink, ry = s.radii[1] - shrink, rz = s.radii[2] - shrink;
    return (x * x) / (rx * rx) + (y * y) / (ry * ry) + (z * z) / (rz * rz) <= 1.0;
  };
  const double sinus_y = s.radii[1] - s.skin - s.sinus_radii[1] - 1;
  // Squared normalized distance to the sinus ellipsoid grown by `grow` mm.
  auto sinus = [&](double x, double y, double z, double grow) {
    const double sx = x / (s.sinus_radii[0] + grow), sy = (y - sinus_y) / (s.sinus_radii[1] + grow),
                 sz = (z - s.sinus_height) / (s.sinus_radii[2] + grow);
    return sx * sx + sy * sy + sz * sz <= 1.0;
  };
  std::mt19937_64 rng(s.seed);
  for (std::int64_t k = 0; k < s.dims[2]; ++k)
    for (std::int64_t j = 0; j < s.dims[1]; ++j)
      for (std::int64_t i = 0; i < s.dims[0]; ++i) {
        const double x = static_cast<double>(i) - s.center[0];
        const double y = static_cast<double>(j) - s.center[1];
        const double z = static_cast<double>(k) - s.center[2];
        std::uint8_t code = kBackground;
        if (inside(x, y, z, 0)) {
          code = shell[0];
          for (int d = 0; d < 4; ++d)
            if (inside(x, y, z, depth[d])) code = shell[d + 1];
          if (code != kSkin) {
            if (sinus(x, y, z, 0)) code = kAir;
            else if (sinus(x, y, z, s.sinus_wall)) code = kBone;
            else if (sinus(x, y, z, 2 * s.sinus_wall) && code != kBone) code = kCsf;
          }
        }
        const auto n = p.labels.grid.index(i, j, k);
        // Voxel storage follows the affine: LPS flips axes 0 and 1.
        const auto idx = s.lps ? p.labels.grid.index(s.dims[0] - 1 - i, s.dims[1] - 1 - j, k) : n;
        p.labels.grid[idx] = code;
        const double noise = code == kBackground ? 0.0 : s.noise_sigma * nn::normal01(rng);
        p.image.grid[idx] = static_cast<float>(std::max(0.0, s.intensity[code] + noise));
      }
  return p;
}

}  // namespace multiaxial
