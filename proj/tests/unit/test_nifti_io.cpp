#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "multiaxial/nifti_io.hpp"
#include "support/scratch.hpp"

using namespace multiaxial;
using testing_support::ScratchDir;

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void gzip_file(const std::filesystem::path& in, const std::filesystem::path& out) {
  const auto b = read_bytes(in);
  gzFile f = gzopen(out.string().c_str(), "wb");
  gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
  gzclose(f);
}

template <class T>
void put(std::vector<unsigned char>& b, std::size_t off, T v) {
  std::memcpy(b.data() + off, &v, sizeof(T));
}

template <class T>
void swap_at(std::vector<unsigned char>& b, std::size_t off) {
  std::reverse(b.begin() + static_cast<std::ptrdiff_t>(off), b.begin() + static_cast<std::ptrdiff_t>(off + sizeof(T)));
}

Volume random_volume(Index3 dims, std::uint64_t seed, double lo, double hi, bool integral) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Volume v;
  v.grid = Grid3<float>(dims);
  for (auto& x : v.grid.values()) x = static_cast<float>(integral ? std::round(u(rng)) : u(rng));
  v.affine << 0.9, 0.1, 0.0, -80.5, -0.05, 1.1, 0.02, -100.25, 0.0, 0.03, 1.2, 40.0, 0, 0, 0, 1;
  return v;
}

struct TypeCase {
  nifti::DataType type;
  double lo, hi;
  bool integral;
};

const TypeCase kTypes[] = {
    {nifti::DataType::kUInt8, 0, 255, true},
    {nifti::DataType::kInt16, -32768, 32767, true},
    {nifti::DataType::kInt32, -2e6, 2e6, true},
    {nifti::DataType::kFloat32, -1e3, 1e3, false},
    {nifti::DataType::kFloat64, -1e3, 1e3, false},
};

}  // namespace

TEST(NiftiHeader, WrittenHeaderIs348BytesWithSingleFileMagic) {
  ScratchDir dir("nifti");
  auto v = random_volume({4, 5, 6}, 1, 0, 10, false);
  nifti::write_nifti(v, dir / "a.nii", nifti::DataType::kFloat32);
  const auto b = read_bytes(dir / "a.nii");
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, b.data(), 4);
  EXPECT_EQ(sizeof_hdr, 348);
  EXPECT_EQ(std::memcmp(b.data() + 344, "n+1\0", 4), 0);
  EXPECT_EQ(b.size(), 352u + 4 * 5 * 6 * 4);
  const auto h = nifti::read_header(dir / "a.nii");
  EXPECT_EQ(h.sform_code, 1);
  EXPECT_EQ(h.scl_slope, 1.0f);
  EXPECT_EQ(h.scl_inter, 0.0f);
}

TEST(NiftiRoundTrip, EveryDatatypePlainAndGzipIsBitwiseLossless) {
  ScratchDir dir("nifti");
  int n = 0;
  for (const auto& tc : kTypes) {
    const auto v = random_volume({16, 16, 16}, 7 + n, tc.lo, tc.hi, tc.integral);
    for (const char* ext : {".nii", ".nii.gz"}) {
      const auto path = dir / ("v" + std::to_string(n) + ext);
      nifti::write_nifti(v, path, tc.type);
      const auto r = nifti::read_nifti(path);
      ASSERT_EQ(r.dims(), v.dims());
      EXPECT_EQ(std::memcmp(r.grid.data(), v.grid.data(), v.grid.size() * sizeof(float)), 0)
          << "datatype " << static_cast<int>(tc.type) << ext;
      EXPECT_LE((r.affine - v.affine).cwiseAbs().maxCoeff(), 1e-6);
    }
    ++n;
  }
}

TEST(NiftiRoundTrip, LabelCodesSurviveUint8) {
  ScratchDir dir("nifti");
  LabelVolume lab;
  lab.grid = Grid3<std::uint8_t>({7, 3, 2});
  for (std::size_t i = 0; i < lab.grid.size(); ++i) lab.grid[i] = static_cast<std::uint8_t>(i % 7);
  nifti::write_nifti(lab, dir / "l.nii.gz", nifti::DataType::kUInt8);
  const auto back = to_labels(nifti::read_nifti(dir / "l.nii.gz"));
  EXPECT_EQ(back.grid.values(), lab.grid.values());
}

TEST(NiftiRoundTrip, LargeInt16VolumeWithSformKeepsDimsAndRows) {
  ScratchDir dir("nifti");
  auto v = random_volume({181, 217, 181}, 3, -100, 1000, true);
  nifti::write_nifti(v, dir / "big.nii", nifti::DataType::kInt16);
  const auto r = nifti::read_nifti(dir / "big.nii");
  EXPECT_EQ(r.dims(), (Index3{181, 217, 181}));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_FLOAT_EQ(float(r.affine(i, j)), float(v.affine(i, j)));
}

TEST(NiftiRead, GzipTwinIsIdentical) {
  ScratchDir dir("nifti");
  auto v = random_volume({9, 8, 7}, 5, -5, 5, false);
  nifti::write_nifti(v, dir / "x.nii", nifti::DataType::kFloat64);
  gzip_file(dir / "x.nii", dir / "x.nii.gz");
  const auto a = nifti::read_nifti(dir / "x.nii");
  const auto b = nifti::read_nifti(dir / "x.nii.gz");
  EXPECT_EQ(a.grid.values(), b.grid.values());
  EXPECT_EQ(a.affine, b.affine);
}

TEST(NiftiRead, AppliesSlopeAndIntercept) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({2, 2, 2}, 5.0f);
  nifti::write_nifti(v, dir / "s.nii", nifti::DataType::kInt16);
  auto b = read_bytes(dir / "s.nii");
  put<float>(b, 112, 2.0f);
  put<float>(b, 116, 1.0f);
  write_bytes(dir / "s.nii", b);
  const auto r = nifti::read_nifti(dir / "s.nii");
  for (float x : r.grid.values()) EXPECT_EQ(x, 11.0f);
}

TEST(NiftiRead, ZeroSlopeMeansUnscaled) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({2, 1, 1}, 5.0f);
  nifti::write_nifti(v, dir / "s.nii", nifti::DataType::kInt16);
  auto b = read_bytes(dir / "s.nii");
  put<float>(b, 112, 0.0f);
  put<float>(b, 116, 9.0f);
  write_bytes(dir / "s.nii", b);
  const auto r = nifti::read_nifti(dir / "s.nii");
  for (float x : r.grid.values()) EXPECT_EQ(x, 5.0f);
}

TEST(NiftiRead, QformUsedWhenSformAbsent) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({3, 3, 3}, 1.0f);
  nifti::write_nifti(v, dir / "q.nii", nifti::DataType::kFloat32);
  auto b = read_bytes(dir / "q.nii");
  // 90 degree rotation about z: quaternion (cos45, 0, 0, sin45).
  const float s = static_cast<float>(std::sqrt(0.5));
  put<std::int16_t>(b, 254, 0);
  put<std::int16_t>(b, 252, 1);
  put<float>(b, 256, 0.0f);
  put<float>(b, 260, 0.0f);
  put<float>(b, 264, s);
  put<float>(b, 268, 10.0f);
  put<float>(b, 272, 20.0f);
  put<float>(b, 276, 30.0f);
  put<float>(b, 76, -1.0f);  // qfac
  put<float>(b, 80, 2.0f);
  put<float>(b, 84, 3.0f);
  put<float>(b, 88, 4.0f);
  write_bytes(dir / "q.nii", b);
  const auto a = nifti::read_nifti(dir / "q.nii").affine;
  // R = [[0,-1,0],[1,0,0],[0,0,1]], columns scaled by (2, 3, -4).
  Affine want = Affine::Identity();
  want.topLeftCorner<3, 3>() << 0, -3, 0, 2, 0, 0, 0, 0, -4;
  want(0, 3) = 10;
  want(1, 3) = 20;
  want(2, 3) = 30;
  EXPECT_LE((a - want).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(NiftiRead, PixdimDiagonalWhenNoTransform) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({3, 3, 3}, 1.0f);
  v.affine.diagonal() << 2.0, 3.0, 4.0, 1.0;
  nifti::write_nifti(v, dir / "p.nii", nifti::DataType::kFloat32);
  auto b = read_bytes(dir / "p.nii");
  put<std::int16_t>(b, 254, 0);
  put<std::int16_t>(b, 252, 0);
  write_bytes(dir / "p.nii", b);
  const auto a = nifti::read_nifti(dir / "p.nii").affine;
  EXPECT_EQ(a.diagonal(), Eigen::Vector4d(2, 3, 4, 1));
  EXPECT_EQ(a.col(3).head<3>(), Eigen::Vector3d::Zero());
}

TEST(NiftiRead, BigEndianFileMatchesLittleEndianTwin) {
  ScratchDir dir("nifti");
  auto v = random_volume({5, 4, 3}, 11, -300, 300, true);
  nifti::write_nifti(v, dir / "le.nii", nifti::DataType::kInt16);
  auto b = read_bytes(dir / "le.nii");
  swap_at<std::int32_t>(b, 0);
  for (int i = 0; i < 8; ++i) swap_at<std::int16_t>(b, 40 + 2 * i);
  swap_at<std::int16_t>(b, 70);
  swap_at<std::int16_t>(b, 72);
  for (int i = 0; i < 8; ++i) swap_at<float>(b, 76 + 4 * i);
  for (std::size_t off : {108, 112, 116}) swap_at<float>(b, off);
  swap_at<std::int16_t>(b, 252);
  swap_at<std::int16_t>(b, 254);
  for (int i = 0; i < 6; ++i) swap_at<float>(b, 256 + 4 * i);
  for (int i = 0; i < 12; ++i) swap_at<float>(b, 280 + 4 * i);
  for (std::size_t i = 0; i < v.grid.size(); ++i) swap_at<std::int16_t>(b, 352 + 2 * i);
  write_bytes(dir / "be.nii", b);
  const auto r = nifti::read_nifti(dir / "be.nii");
  EXPECT_TRUE(nifti::read_header(dir / "be.nii").big_endian);
  EXPECT_EQ(r.grid.values(), v.grid.values());
  EXPECT_LE((r.affine - v.affine).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(NiftiRead, HeaderImagePair) {
  ScratchDir dir("nifti");
  auto v = random_volume({6, 5, 4}, 13, -10, 10, false);
  nifti::write_nifti(v, dir / "s.nii", nifti::DataType::kFloat32);
  auto b = read_bytes(dir / "s.nii");
  std::vector<unsigned char> hdr(b.begin(), b.begin() + 348), img(b.begin() + 352, b.end());
  std::memcpy(hdr.data() + 344, "ni1\0", 4);
  put<float>(hdr, 108, 0.0f);
  write_bytes(dir / "pair.hdr", hdr);
  write_bytes(dir / "pair.img", img);
  EXPECT_EQ(nifti::read_nifti(dir / "pair.hdr").grid.values(), v.grid.values());
}

TEST(NiftiRead, SingletonFourthAxisCollapses) {
  ScratchDir dir("nifti");
  auto v = random_volume({3, 3, 3}, 17, 0, 1, false);
  nifti::write_nifti(v, dir / "f.nii", nifti::DataType::kFloat32);
  auto b = read_bytes(dir / "f.nii");
  put<std::int16_t>(b, 40, 4);
  write_bytes(dir / "f.nii", b);
  EXPECT_EQ(nifti::read_nifti(dir / "f.nii").dims(), (Index3{3, 3, 3}));
  put<std::int16_t>(b, 48, 2);
  b.resize(b.size() + 27 * 4);
  write_bytes(dir / "g.nii", b);
  EXPECT_THROW(nifti::read_nifti(dir / "g.nii"), UnsupportedFormatError);
}

TEST(NiftiRead, NonFiniteVoxelsBecomeZeroAndAreCounted) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({3, 1, 1}, 2.0f);
  v.grid[1] = std::numeric_limits<float>::quiet_NaN();
  v.grid[2] = std::numeric_limits<float>::infinity();
  nifti::write_nifti(v, dir / "n.nii", nifti::DataType::kFloat32);
  const auto r = nifti::read_nifti(dir / "n.nii");
  EXPECT_EQ(r.grid.values(), (std::vector<float>{2, 0, 0}));
  EXPECT_EQ(r.provenance.back().params.at("nonfinite_replaced").get<int>(), 2);
}

TEST(NiftiErrors, BadMagicNamesBytes) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({2, 2, 2});
  nifti::write_nifti(v, dir / "m.nii", nifti::DataType::kFloat32);
  auto b = read_bytes(dir / "m.nii");
  std::memcpy(b.data() + 344, "abc\0", 4);
  write_bytes(dir / "m.nii", b);
  try {
    nifti::read_nifti(dir / "m.nii");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("61 62 63 00"), std::string::npos) << e.what();
  }
}

TEST(NiftiErrors, UnsupportedDatatypeListsSupportedCodes) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({2, 2, 2});
  nifti::write_nifti(v, dir / "d.nii", nifti::DataType::kFloat32);
  auto b = read_bytes(dir / "d.nii");
  put<std::int16_t>(b, 70, 32);  // complex64
  write_bytes(dir / "d.nii", b);
  try {
    nifti::read_nifti(dir / "d.nii");
    FAIL() << "expected UnsupportedFormatError";
  } catch (const UnsupportedFormatError& e) {
    const std::string msg = e.what();
    for (const char* code : {"2 uint8", "4 int16", "8 int32", "16 float32", "64 float64"})
      EXPECT_NE(msg.find(code), std::string::npos) << msg;
  }
}

TEST(NiftiErrors, TruncatedDataReportsByteCounts) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({4, 4, 4});
  nifti::write_nifti(v, dir / "t.nii", nifti::DataType::kFloat32);
  auto b = read_bytes(dir / "t.nii");
  b.resize(b.size() - 10);
  write_bytes(dir / "t.nii", b);
  try {
    nifti::read_nifti(dir / "t.nii");
    FAIL() << "expected LengthMismatchError";
  } catch (const LengthMismatchError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("256"), std::string::npos) << msg;
    EXPECT_NE(msg.find("246"), std::string::npos) << msg;
  }
}

TEST(NiftiErrors, Uint8RangeAndUnwritablePath) {
  ScratchDir dir("nifti");
  Volume v;
  v.grid = Grid3<float>({2, 1, 1}, 300.0f);
  EXPECT_THROW(nifti::write_nifti(v, dir / "r.nii", nifti::DataType::kUInt8), RangeError);
  v.grid = Grid3<float>({2, 1, 1}, 1.0f);
  EXPECT_THROW(nifti::write_nifti(v, dir / "missing" / "x.nii", nifti::DataType::kUInt8), IoError);
  EXPECT_THROW(nifti::read_nifti(dir / "absent.nii"), IoError);
}

TEST(Orientation, CanonicalExamples) {
  Affine id = Affine::Identity();
  auto o = nifti::orientation_codes(id);
  EXPECT_EQ(o.permutation, (std::array<int, 3>{0, 1, 2}));
  EXPECT_EQ(o.sign, (std::array<int, 3>{1, 1, 1}));

  Affine lps = Affine::Identity();
  lps(0, 0) = -1;
  lps(1, 1) = -1;
  o = nifti::orientation_codes(lps);
  EXPECT_EQ(o.permutation, (std::array<int, 3>{0, 1, 2}));
  EXPECT_EQ(o.sign, (std::array<int, 3>{-1, -1, 1}));
  EXPECT_EQ(nifti::orientation_string(o), "LPS");

  Affine swapped = Affine::Identity();
  swapped.topLeftCorner<3, 3>() << 0, 0, 1, 0, 1, 0, 1, 0, 0;
  o = nifti::orientation_codes(swapped);
  EXPECT_EQ(o.permutation, (std::array<int, 3>{2, 1, 0}));
  EXPECT_EQ(o.sign, (std::array<int, 3>{1, 1, 1}));
}

TEST(Orientation, ObliqueAffineMatchesHandComputedArgmax) {
  Affine a = Affine::Identity();
  // Columns: voxel axis 0 mostly -A, axis 1 mostly +S, axis 2 mostly +R.
  a.topLeftCorner<3, 3>() << 0.2, 0.1, 0.95, -0.9, 0.3, 0.1, 0.1, 0.9, 0.2;
  const auto o = nifti::orientation_codes(a);
  EXPECT_EQ(o.permutation, (std::array<int, 3>{1, 2, 0}));
  EXPECT_EQ(o.sign, (std::array<int, 3>{-1, 1, 1}));
}

TEST(Orientation, SingularAffineRejected) {
  Affine a = Affine::Identity();
  a(2, 2) = 0;
  EXPECT_THROW(nifti::orientation_codes(a), GeometryError);
}

TEST(OrientationProperty, AlwaysABijection) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 500; ++t) {
    Affine a = Affine::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a(r, c) = n(rng);
    if (std::abs(a.topLeftCorner<3, 3>().determinant()) < 1e-6) continue;
    const auto o = nifti::orientation_codes(a);
    std::array<int, 3> seen{};
    for (int p : o.permutation) ++seen[static_cast<std::size_t>(p)];
    EXPECT_EQ(seen, (std::array<int, 3>{1, 1, 1}));
  }
}
