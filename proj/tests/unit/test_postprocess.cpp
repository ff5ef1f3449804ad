#include <gtest/gtest.h>

#include <queue>
#include <random>

#include "multiaxial/phantom.hpp"
#include "multiaxial/postprocess.hpp"

using namespace multiaxial;
namespace pp = multiaxial::postprocess;

namespace {

Grid3<std::uint8_t> row(std::initializer_list<int> codes) {
  Grid3<std::uint8_t> g({static_cast<std::int64_t>(codes.size()), 1, 1});
  std::size_t i = 0;
  for (int c : codes) g[i++] = static_cast<std::uint8_t>(c);
  return g;
}

std::vector<int> codes_of(const Grid3<std::uint8_t>& g) { return {g.values().begin(), g.values().end()}; }

Grid3<std::uint8_t> block(Index3 dims, std::uint8_t fill) { return Grid3<std::uint8_t>(dims, fill); }

void fill_box(Grid3<std::uint8_t>& g, Index3 lo, Index3 hi, std::uint8_t code) {
  for (auto k = lo[2]; k < hi[2]; ++k)
    for (auto j = lo[1]; j < hi[1]; ++j)
      for (auto i = lo[0]; i < hi[0]; ++i) g(i, j, k) = code;
}

/// Random blobby label volume: a few boxes of random classes on background.
Grid3<std::uint8_t> random_volume(std::uint64_t seed, Index3 dims = {20, 18, 16}) {
  std::mt19937_64 rng(seed);
  Grid3<std::uint8_t> g(dims, kBackground);
  for (int b = 0; b < 40; ++b) {
    Index3 lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(dims[a]));
      hi[a] = std::min(dims[a], lo[a] + 1 + static_cast<std::int64_t>(rng() % 7));
    }
    fill_box(g, lo, hi, static_cast<std::uint8_t>(rng() % kNumClasses));
  }
  for (int n = 0; n < 60; ++n) g[rng() % g.size()] = static_cast<std::uint8_t>(rng() % kNumClasses);
  return g;
}

/// Independent flood fill from the border through 6-connected voxels of `code`.
std::vector<bool> reachable_from_border(const Grid3<std::uint8_t>& g, std::uint8_t code) {
  const auto& d = g.dims();
  std::vector<bool> seen(g.size(), false);
  std::queue<Index3> q;
  for (std::int64_t k = 0; k < d[2]; ++k)
    for (std::int64_t j = 0; j < d[1]; ++j)
      for (std::int64_t i = 0; i < d[0]; ++i) {
        const bool border = i == 0 || j == 0 || k == 0 || i == d[0] - 1 || j == d[1] - 1 || k == d[2] - 1;
        if (border && g(i, j, k) == code) {
          seen[g.index(i, j, k)] = true;
          q.push({i, j, k});
        }
      }
  const int step[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  while (!q.empty()) {
    const auto p = q.front();
    q.pop();
    for (const auto& s : step) {
      const auto i = p[0] + s[0], j = p[1] + s[1], k = p[2] + s[2];
      if (!g.contains(i, j, k) || g(i, j, k) != code || seen[g.index(i, j, k)]) continue;
      seen[g.index(i, j, k)] = true;
      q.push({i, j, k});
    }
  }
  return seen;
}

PhantomSpec small_phantom() {
  PhantomSpec s;
  s.dims = {64, 72, 64};
  s.center = {32, 36, 32};
  s.radii = {28, 33, 29};
  s.skin = 3;
  s.bone = 3;
  s.csf = 2;
  s.gray = 3;
  s.sinus_radii = {5, 3, 3};
  s.sinus_wall = 2;
  s.sinus_height = -8;
  s.seed = 4;
  return s;
}

}  // namespace

TEST(RelabelBone, AdjacentToGrayBecomesCsf) {
  auto g = row({6, 5, 3});
  EXPECT_EQ(pp::relabel_bone_touching_brain(g), 1);
  EXPECT_EQ(codes_of(g), (std::vector<int>{6, 4, 3}));
}

TEST(RelabelBone, SurroundedBySkinUnchanged) {
  auto g = block({3, 3, 3}, kSkin);
  g(1, 1, 1) = kBone;
  EXPECT_EQ(pp::relabel_bone_touching_brain(g), 0);
  EXPECT_EQ(g(1, 1, 1), kBone);
}

TEST(RelabelBone, SimultaneousNotCascading) {
  auto stripe = row({5, 3, 5, 3, 5, 3, 5});
  EXPECT_EQ(pp::relabel_bone_touching_brain(stripe), 4);
  EXPECT_EQ(codes_of(stripe), (std::vector<int>{4, 3, 4, 3, 4, 3, 4}));
  auto chain = row({2, 5, 5, 5});
  EXPECT_EQ(pp::relabel_bone_touching_brain(chain), 1);
  EXPECT_EQ(codes_of(chain), (std::vector<int>{2, 4, 5, 5}));
}

TEST(RelabelBone, DiagonalContactDoesNotCount) {
  auto g = block({2, 2, 1}, kSkin);
  g(0, 0, 0) = kBone;
  g(1, 1, 0) = kWhiteMatter;
  EXPECT_EQ(pp::relabel_bone_touching_brain(g), 0);
}

TEST(FillEnclosed, HollowSkinSphereInteriorBecomesBone) {
  Grid3<std::uint8_t> g({21, 21, 21}, kBackground);
  std::int64_t interior = 0;
  for (std::int64_t k = 0; k < 21; ++k)
    for (std::int64_t j = 0; j < 21; ++j)
      for (std::int64_t i = 0; i < 21; ++i) {
        const double r = std::sqrt(double((i - 10) * (i - 10) + (j - 10) * (j - 10) + (k - 10) * (k - 10)));
        if (r <= 8 && r > 6) g(i, j, k) = kSkin;
        interior += r <= 6;
      }
  auto want = g;
  const auto outside = reachable_from_border(g, kBackground);
  for (std::size_t v = 0; v < g.size(); ++v)
    if (g[v] == kBackground && !outside[v]) want[v] = kBone;
  EXPECT_EQ(pp::fill_enclosed_background_as_bone(g), interior);
  EXPECT_EQ(g.values(), want.values());
}

TEST(FillEnclosed, BorderBackgroundAndNoBackgroundAreIdentity) {
  auto g = block({5, 5, 5}, kBackground);
  g(2, 2, 2) = kSkin;
  auto before = g;
  EXPECT_EQ(pp::fill_enclosed_background_as_bone(g), 0);
  EXPECT_EQ(g.values(), before.values());
  auto full = block({4, 4, 4}, kWhiteMatter);
  EXPECT_EQ(pp::fill_enclosed_background_as_bone(full), 0);
}

TEST(FillEnclosed, MatchesFloodFillOracleOnRandomVolumes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto g = random_volume(seed);
    auto want = g;
    const auto outside = reachable_from_border(g, kBackground);
    for (std::size_t v = 0; v < g.size(); ++v)
      if (g[v] == kBackground && !outside[v]) want[v] = kBone;
    pp::fill_enclosed_background_as_bone(g);
    EXPECT_EQ(g.values(), want.values()) << "seed " << seed;
  }
}

TEST(ClearExternalAir, BorderBlobCleared) {
  auto g = block({6, 6, 6}, kSkin);
  fill_box(g, {0, 0, 0}, {2, 2, 2}, kAir);
  EXPECT_EQ(pp::clear_external_air(g), 8);
  EXPECT_EQ(g(0, 0, 0), kBackground);
  EXPECT_EQ(g(1, 1, 1), kBackground);
}

TEST(ClearExternalAir, InteriorPocketKeptAndAllAirCleared) {
  auto g = block({7, 7, 7}, kBone);
  fill_box(g, {2, 2, 2}, {5, 5, 5}, kAir);
  EXPECT_EQ(pp::clear_external_air(g), 0);
  EXPECT_EQ(g(3, 3, 3), kAir);
  auto all = block({4, 3, 2}, kAir);
  EXPECT_EQ(pp::clear_external_air(all), 24);
  for (auto c : all.values()) EXPECT_EQ(c, kBackground);
}

TEST(ClearExternalAir, MatchesFloodFillOracleOnRandomVolumes) {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    auto g = random_volume(seed);
    auto want = g;
    const auto outside = reachable_from_border(g, kAir);
    for (std::size_t v = 0; v < g.size(); ++v)
      if (outside[v]) want[v] = kBackground;
    pp::clear_external_air(g);
    EXPECT_EQ(g.values(), want.values()) << "seed " << seed;
  }
}

TEST(RemoveSmall, StrayGrayVoxelInsideBoneBecomesBone) {
  auto g = block({5, 5, 5}, kBone);
  g(2, 2, 2) = kGrayMatter;
  EXPECT_EQ(pp::remove_small_components(g, 27), 1);
  EXPECT_EQ(g(2, 2, 2), kBone);
}

TEST(RemoveSmall, ComponentAtThresholdKept) {
  auto g = block({7, 7, 7}, kBone);
  fill_box(g, {2, 2, 2}, {5, 5, 5}, kCsf);
  EXPECT_EQ(pp::remove_small_components(g, 27), 0);
  EXPECT_EQ(g(3, 3, 3), kCsf);
  EXPECT_EQ(pp::remove_small_components(g, 28), 27);
  EXPECT_EQ(g(3, 3, 3), kBone);
}

TEST(RemoveSmall, ThresholdOneIsIdentity) {
  auto g = random_volume(7);
  const auto before = g;
  EXPECT_EQ(pp::remove_small_components(g, 1), 0);
  EXPECT_EQ(g.values(), before.values());
  EXPECT_THROW(pp::remove_small_components(g, 0), DomainError);
}

TEST(RemoveSmall, PluralityOfBoundaryNeighbors) {
  // Center CSF voxel; its 26 neighbors split 17 skin / 9 bone.
  auto g = block({3, 3, 3}, kSkin);
  for (std::int64_t j = 0; j < 3; ++j)
    for (std::int64_t i = 0; i < 3; ++i) g(i, j, 0) = kBone;
  g(1, 1, 1) = kCsf;
  EXPECT_EQ(pp::remove_small_components(g, 2), 1);
  EXPECT_EQ(g(1, 1, 1), kSkin);
}

TEST(RemoveSmall, TieGoesToLowestCode) {
  // 13 bone and 13 skin neighbors around a single CSF voxel.
  auto g = block({3, 3, 3}, kSkin);
  int placed = 0;
  for (std::size_t v = 0; v < g.size() && placed < 13; ++v) {
    if (v == g.index(1, 1, 1)) continue;
    g[v] = kBone;
    ++placed;
  }
  g(1, 1, 1) = kCsf;
  pp::remove_small_components(g, 2);
  EXPECT_EQ(g(1, 1, 1), kBone);
}

TEST(RemoveSmall, BackgroundIsExempt) {
  auto g = block({5, 5, 5}, kSkin);
  g(2, 2, 2) = kBackground;
  EXPECT_EQ(pp::remove_small_components(g, 27), 0);
  EXPECT_EQ(g(2, 2, 2), kBackground);
}

TEST(RuleProperty, EachRuleOnlyChangesItsSourceClass) {
  for (std::uint64_t seed = 200; seed < 220; ++seed) {
    const auto g = random_volume(seed);
    auto check = [&](auto rule, auto source) {
      auto h = g;
      rule(h);
      for (std::size_t v = 0; v < g.size(); ++v)
        if (h[v] != g[v]) EXPECT_TRUE(source(g[v])) << "seed " << seed;
    };
    check([](auto& h) { pp::clear_external_air(h); }, [](std::uint8_t c) { return c == kAir; });
    check([](auto& h) { pp::fill_enclosed_background_as_bone(h); }, [](std::uint8_t c) { return c == kBackground; });
    check([](auto& h) { pp::relabel_bone_touching_brain(h); }, [](std::uint8_t c) { return c == kBone; });
    check([](auto& h) { pp::remove_small_components(h, 27); }, [](std::uint8_t c) { return c != kBackground; });
  }
}

TEST(ApplyAll, ConsistentLabelsAreUntouched) {
  auto g = block({9, 9, 9}, kBackground);
  fill_box(g, {1, 1, 1}, {8, 8, 8}, kSkin);
  fill_box(g, {2, 2, 2}, {7, 7, 7}, kCsf);
  fill_box(g, {3, 3, 3}, {6, 6, 6}, kWhiteMatter);
  const auto before = g;
  const auto r = pp::apply_all(g);
  EXPECT_EQ(r.total(), 0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(g.values(), before.values());
}

TEST(ApplyAll, PhantomWithOneOfEachDefect) {
  auto lab = make_phantom(small_phantom()).labels;
  auto& g = lab.grid;
  ASSERT_TRUE(pp::check(g, 27).none());
  fill_box(g, {0, 0, 0}, {3, 3, 3}, kAir);        // air outside the head
  fill_box(g, {31, 35, 31}, {34, 38, 34}, kBackground);  // hole inside white matter
  g(32, 36, 32 + 20) = kBone;                      // bone in brain tissue
  g(32, 36, 32 + 27) = kGrayMatter;                // stray voxel in the skin/bone shell
  const auto r = pp::apply_all(lab);
  EXPECT_GT(r.external_air, 0);
  EXPECT_GT(r.enclosed_background, 0);
  EXPECT_GT(r.bone_near_brain, 0);
  EXPECT_GT(r.small_components, 0);
  EXPECT_TRUE(r.converged);
  EXPECT_TRUE(pp::check(g, 27).none());
  const auto once = g;
  const auto again = pp::apply_all(lab);
  EXPECT_EQ(again.total(), 0);
  EXPECT_EQ(g.values(), once.values());
}

TEST(ApplyAll, DefaultPhantomTruthIsConsistent) {
  const auto lab = make_phantom(PhantomSpec{}).labels;
  const auto v = pp::check(lab.grid, 27);
  EXPECT_EQ(v.bone_near_brain, 0);
  EXPECT_EQ(v.enclosed_background, 0);
  EXPECT_EQ(v.external_air, 0);
  EXPECT_EQ(v.small_components, 0);
}

TEST(ApplyAllProperty, RandomVolumesReachPostConditionsAndAreIdempotent) {
  for (std::uint64_t seed = 300; seed < 320; ++seed) {
    auto g = random_volume(seed, {24, 22, 20});
    const auto r = pp::apply_all(g);
    EXPECT_TRUE(r.converged) << "seed " << seed;
    const auto v = pp::check(g, 27);
    EXPECT_TRUE(v.none()) << "seed " << seed << " bone " << v.bone_near_brain << " bg " << v.enclosed_background
                          << " air " << v.external_air << " small " << v.small_components;
    const auto once = g;
    EXPECT_EQ(pp::apply_all(g).total(), 0) << "seed " << seed;
    EXPECT_EQ(g.values(), once.values());
  }
}

TEST(ApplyAll, ReportText) {
  pp::Report r;
  r.external_air = 3;
  r.iterations = 2;
  r.converged = true;
  const auto t = r.to_text();
  EXPECT_NE(t.find("clear_external_air = 3"), std::string::npos);
  EXPECT_NE(t.find("converged = true"), std::string::npos);
}

TEST(Components, DenseIdsAndBorderFlags) {
  auto g = block({5, 1, 1}, kBackground);
  g[0] = kSkin;
  g[2] = kSkin;
  g[3] = kSkin;
  const auto m = pp::label_components(g, pp::Connectivity::k6, [](std::uint8_t c) { return c == kSkin; });
  ASSERT_EQ(m.components.size(), 2u);
  EXPECT_EQ(m.id[0], 1);
  EXPECT_EQ(m.id[2], 2);
  EXPECT_EQ(m.id[3], 2);
  EXPECT_EQ(m[2].size, 2);
  EXPECT_TRUE(m[1].touches_border);
}
