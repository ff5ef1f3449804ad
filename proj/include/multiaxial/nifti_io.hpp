#pragma once

// NIfTI-1 reader/writer for the single-file (.nii, .nii.gz) and pair
// (.hdr/.img) layouts. Only the subset the segmentation pipeline needs is
// supported: 3D (or 4D with a singleton 4th axis) scalar volumes of type
// uint8, int16, int32, float32 or float64.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "multiaxial/error.hpp"
#include "multiaxial/image.hpp"

namespace multiaxial::nifti {

enum class DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kSingleFileOffset = 352;

inline bool is_supported(int code) {
  switch (code) {
    case 2: case 4: case 8: case 16: case 64: return true;
    default: return false;
  }
}

inline int bytes_per_voxel(DataType t) {
  switch (t) {
    case DataType::kUInt8: return 1;
    case DataType::kInt16: return 2;
    case DataType::kInt32: return 4;
    case DataType::kFloat32: return 4;
    case DataType::kFloat64: return 8;
  }
  return 0;
}

inline DataType checked_datatype(int code) {
  if (!is_supported(code))
    throw UnsupportedFormatError("unsupported NIfTI datatype code " + std::to_string(code) +
                                 " (supported: 2 uint8, 4 int16, 8 int32, 16 float32, 64 float64)");
  return static_cast<DataType>(code);
}

struct Header {
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 0;
  float scl_slope = 0;
  float scl_inter = 0;
  std::uint8_t xyzt_units = 0;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  float quatern_b = 0, quatern_c = 0, quatern_d = 0;
  float qoffset_x = 0, qoffset_y = 0, qoffset_z = 0;
  std::array<std::array<float, 4>, 3> srow{};
  std::array<char, 80> descrip{};
  std::array<char, 4> magic{};
  bool big_endian = false;

  Index3 dims3() const { return {dim[1], dim[2], dim[3]}; }
};

namespace detail {

template <class T>
T byteswap_value(T v) {
  std::array<unsigned char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

template <class T>
T load(const unsigned char* p, bool big_endian) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  const bool host_big = std::endian::native == std::endian::big;
  return big_endian != host_big ? byteswap_value(v) : v;
}

template <class T>
void store_le(unsigned char* p, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
  std::memcpy(p, &v, sizeof(T));
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Reads a whole file, transparently inflating gzip content.
inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf;
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      int errnum = 0;
      std::string msg = gzerror(f, &errnum);
      gzclose(f);
      throw IoError("read error in " + path.string() + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

inline void spill(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  const std::string p = path.string();
  if (has_suffix(p, ".gz")) {
    gzFile f = gzopen(p.c_str(), "wb6");
    if (!f) throw IoError("cannot open " + p + " for writing");
    std::size_t done = 0;
    while (done < bytes.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
      if (gzwrite(f, bytes.data() + done, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw IoError("write error in " + p);
      }
      done += chunk;
    }
    if (gzclose(f) != Z_OK) throw IoError("write error in " + p);
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + p + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write error in " + p);
}

inline std::string describe_bytes(const unsigned char* p, std::size_t n) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += hex[p[i] >> 4];
    s += hex[p[i] & 15];
  }
  return s;
}

}  // namespace detail

/// Parses the 348-byte header. Byte order is detected from dim[0], which
/// must fall in 1..7 under the correct interpretation.
inline Header parse_header(const unsigned char* p, std::size_t available) {
  using detail::load;
  if (available < kHeaderSize)
    throw LengthMismatchError("header needs " + std::to_string(kHeaderSize) + " bytes, got " +
                              std::to_string(available));
  Header h;
  const auto dim0_le = load<std::int16_t>(p + 40, false);
  const auto dim0_be = load<std::int16_t>(p + 40, true);
  if (dim0_le >= 1 && dim0_le <= 7) {
    h.big_endian = false;
  } else if (dim0_be >= 1 && dim0_be <= 7) {
    h.big_endian = true;
  } else {
    throw ParseError("cannot determine byte order: dim[0] bytes " + detail::describe_bytes(p + 40, 2));
  }
  const bool be = h.big_endian;
  if (load<std::int32_t>(p, be) != static_cast<std::int32_t>(kHeaderSize))
    throw ParseError("sizeof_hdr is not 348 (bytes " + detail::describe_bytes(p, 4) + ")");

  std::memcpy(h.magic.data(), p + 344, 4);
  const bool single = std::memcmp(h.magic.data(), "n+1\0", 4) == 0;
  const bool pair = std::memcmp(h.magic.data(), "ni1\0", 4) == 0;
  if (!single && !pair)
    throw ParseError("bad NIfTI-1 magic bytes " + detail::describe_bytes(p + 344, 4) +
                     " (expected 6e 2b 31 00 or 6e 69 31 00)");

  for (int i = 0; i < 8; ++i) h.dim[i] = load<std::int16_t>(p + 40 + 2 * i, be);
  h.datatype = load<std::int16_t>(p + 70, be);
  h.bitpix = load<std::int16_t>(p + 72, be);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = load<float>(p + 76 + 4 * i, be);
  h.vox_offset = load<float>(p + 108, be);
  h.scl_slope = load<float>(p + 112, be);
  h.scl_inter = load<float>(p + 116, be);
  h.xyzt_units = p[123];
  std::memcpy(h.descrip.data(), p + 148, 80);
  h.qform_code = load<std::int16_t>(p + 252, be);
  h.sform_code = load<std::int16_t>(p + 254, be);
  h.quatern_b = load<float>(p + 256, be);
  h.quatern_c = load<float>(p + 260, be);
  h.quatern_d = load<float>(p + 264, be);
  h.qoffset_x = load<float>(p + 268, be);
  h.qoffset_y = load<float>(p + 272, be);
  h.qoffset_z = load<float>(p + 276, be);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) h.srow[r][c] = load<float>(p + 280 + 16 * r + 4 * c, be);
  return h;
}

/// Voxel-to-world transform: sform if set, else the quaternion qform, else
/// a diagonal from pixdim.
inline Affine header_affine(const Header& h) {
  Affine a = Affine::Identity();
  if (h.sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) a(r, c) = h.srow[r][c];
    return a;
  }
  const auto pix = [&](int i) { return h.pixdim[i] > 0 ? double(h.pixdim[i]) : 1.0; };
  if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    const double a2 = 1.0 - (b * b + c * c + d * d);
    const double qa = a2 > 1e-7 ? std::sqrt(a2) : 0.0;
    Eigen::Matrix3d r;
    r << qa * qa + b * b - c * c - d * d, 2 * (b * c - qa * d), 2 * (b * d + qa * c),
        2 * (b * c + qa * d), qa * qa + c * c - b * b - d * d, 2 * (c * d - qa * b),
        2 * (b * d - qa * c), 2 * (c * d + qa * b), qa * qa + d * d - c * c - b * b;
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    r.col(0) *= pix(1);
    r.col(1) *= pix(2);
    r.col(2) *= qfac * pix(3);
    a.topLeftCorner<3, 3>() = r;
    a(0, 3) = h.qoffset_x;
    a(1, 3) = h.qoffset_y;
    a(2, 3) = h.qoffset_z;
    return a;
  }
  for (int i = 0; i < 3; ++i) a(i, i) = pix(i + 1);
  return a;
}

/// Reads a NIfTI-1 volume, converting voxels to float and applying
/// scl_slope/scl_inter when the slope is nonzero. Non-finite voxels are
/// replaced by 0 and counted in the "read" provenance step.
inline Volume read_nifti(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = detail::slurp(path);
  const Header h = parse_header(bytes.data(), bytes.size());

  if (h.dim[0] < 3 || h.dim[0] > 4)
    throw UnsupportedFormatError("only 3D volumes are supported (dim[0]=" + std::to_string(h.dim[0]) + ")");
  if (h.dim[0] == 4 && h.dim[4] > 1)
    throw UnsupportedFormatError("4D series with " + std::to_string(h.dim[4]) + " frames not supported");
  for (int i = 1; i <= 3; ++i)
    if (h.dim[i] <= 0) throw ParseError("nonpositive dim[" + std::to_string(i) + "]");
  const DataType type = checked_datatype(h.datatype);

  const Index3 dims = h.dims3();
  const std::size_t n = static_cast<std::size_t>(voxel_count(dims));
  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(type));

  std::vector<unsigned char> pair_bytes;
  const unsigned char* payload = nullptr;
  std::size_t payload_avail = 0;
  if (std::memcmp(h.magic.data(), "n+1\0", 4) == 0) {
    const auto offset = static_cast<std::size_t>(std::max<float>(h.vox_offset, kSingleFileOffset));
    payload = bytes.data() + std::min(offset, bytes.size());
    payload_avail = bytes.size() > offset ? bytes.size() - offset : 0;
  } else {
    std::filesystem::path img = path;
    std::string s = img.string();
    if (detail::has_suffix(s, ".hdr.gz")) s = s.substr(0, s.size() - 7) + ".img.gz";
    else if (detail::has_suffix(s, ".hdr")) s = s.substr(0, s.size() - 4) + ".img";
    else throw ParseError("header/image pair magic in a file without a .hdr suffix");
    if (!std::filesystem::exists(s) && detail::has_suffix(s, ".img")) s += ".gz";
    pair_bytes = detail::slurp(s);
    const auto offset = static_cast<std::size_t>(std::max<float>(h.vox_offset, 0.f));
    payload = pair_bytes.data() + std::min(offset, pair_bytes.size());
    payload_avail = pair_bytes.size() > offset ? pair_bytes.size() - offset : 0;
  }
  if (payload_avail < n * bpv)
    throw LengthMismatchError("voxel data truncated: expected " + std::to_string(n * bpv) +
                              " bytes, found " + std::to_string(payload_avail));

  Volume vol;
  vol.grid = Grid3<float>(dims);
  vol.affine = header_affine(h);
  require_nonsingular(vol.affine);

  const bool scale = h.scl_slope != 0.0f && std::isfinite(h.scl_slope) &&
                     !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);
  const double slope = h.scl_slope, inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
  std::int64_t nonfinite = 0;
  auto& out = vol.grid.values();
  const bool be = h.big_endian;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = payload + i * bpv;
    double v = 0;
    switch (type) {
      case DataType::kUInt8: v = p[0]; break;
      case DataType::kInt16: v = detail::load<std::int16_t>(p, be); break;
      case DataType::kInt32: v = detail::load<std::int32_t>(p, be); break;
      case DataType::kFloat32: v = detail::load<float>(p, be); break;
      case DataType::kFloat64: v = detail::load<double>(p, be); break;
    }
    if (scale) v = slope * v + inter;
    float f = static_cast<float>(v);
    if (!std::isfinite(f)) {
      f = 0.0f;
      ++nonfinite;
    }
    out[i] = f;
  }
  vol.provenance.push_back({"read",
                            {{"path", path.string()},
                             {"datatype", h.datatype},
                             {"big_endian", be},
                             {"transform", h.sform_code > 0 ? "sform" : (h.qform_code > 0 ? "qform" : "pixdim")},
                             {"nonfinite_replaced", nonfinite}}});
  return vol;
}

/// Writes a single-file NIfTI-1 ("n+1"), little-endian, sform_code 1 with
/// the image affine, unit scaling. Values are rounded and range-checked for
/// integer datatypes.
template <class T>
void write_nifti(const Image<T>& img, const std::filesystem::path& path, DataType type) {
  using detail::store_le;
  const int code = static_cast<int>(type);
  checked_datatype(code);
  const Index3 dims = img.dims();
  for (auto d : dims)
    if (d > std::numeric_limits<std::int16_t>::max())
      throw RangeError("dimension " + std::to_string(d) + " exceeds NIfTI-1 limit");
  const std::size_t n = img.grid.size();
  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(type));

  std::vector<unsigned char> bytes(kSingleFileOffset + n * bpv, 0);
  unsigned char* p = bytes.data();
  store_le<std::int32_t>(p, static_cast<std::int32_t>(kHeaderSize));
  p[38] = 'r';
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(dims[0]),
                                        static_cast<std::int16_t>(dims[1]),
                                        static_cast<std::int16_t>(dims[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) store_le<std::int16_t>(p + 40 + 2 * i, dim[i]);
  store_le<std::int16_t>(p + 70, static_cast<std::int16_t>(code));
  store_le<std::int16_t>(p + 72, static_cast<std::int16_t>(8 * bpv));
  const auto sp = img.spacing();
  const std::array<float, 8> pixdim{1.0f, float(sp[0]), float(sp[1]), float(sp[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) store_le<float>(p + 76 + 4 * i, pixdim[i]);
  store_le<float>(p + 108, static_cast<float>(kSingleFileOffset));
  store_le<float>(p + 112, 1.0f);
  store_le<float>(p + 116, 0.0f);
  p[123] = 2;  // mm
  store_le<std::int16_t>(p + 252, 0);
  store_le<std::int16_t>(p + 254, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) store_le<float>(p + 280 + 16 * r + 4 * c, static_cast<float>(img.affine(r, c)));
  std::memcpy(p + 344, "n+1\0", 4);

  unsigned char* out = p + kSingleFileOffset;
  const auto& v = img.grid.values();
  auto integral = [&](std::size_t i, double lo, double hi) {
    const double x = std::nearbyint(static_cast<double>(v[i]));
    if (!(x >= lo && x <= hi))
      throw RangeError("voxel value " + std::to_string(static_cast<double>(v[i])) +
                       " does not fit datatype " + std::to_string(code));
    return x;
  };
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char* q = out + i * bpv;
    switch (type) {
      case DataType::kUInt8: q[0] = static_cast<std::uint8_t>(integral(i, 0, 255)); break;
      case DataType::kInt16: store_le<std::int16_t>(q, static_cast<std::int16_t>(integral(i, -32768, 32767))); break;
      case DataType::kInt32:
        store_le<std::int32_t>(q, static_cast<std::int32_t>(integral(i, -2147483648.0, 2147483647.0)));
        break;
      case DataType::kFloat32: store_le<float>(q, static_cast<float>(v[i])); break;
      case DataType::kFloat64: store_le<double>(q, static_cast<double>(v[i])); break;
    }
  }
  detail::spill(path, bytes);
}

inline Header read_header(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  return parse_header(bytes.data(), bytes.size());
}

/// For each voxel axis, the world axis (0=R, 1=A, 2=S) it is most aligned
/// with and the sign of that alignment. Axes are assigned greedily in
/// order of decreasing direction-cosine magnitude.
struct Orientation {
  std::array<int, 3> permutation{0, 1, 2};
  std::array<int, 3> sign{1, 1, 1};

  bool is_identity() const {
    return permutation == std::array<int, 3>{0, 1, 2} && sign == std::array<int, 3>{1, 1, 1};
  }
  bool operator==(const Orientation&) const = default;
};

inline Orientation orientation_codes(const Affine& affine) {
  require_nonsingular(affine);
  Eigen::Matrix3d cosines = affine.topLeftCorner<3, 3>();
  for (int a = 0; a < 3; ++a) cosines.col(a).normalize();

  struct Entry {
    double magnitude;
    int voxel_axis;
    int world_axis;
  };
  std::vector<Entry> entries;
  for (int a = 0; a < 3; ++a)
    for (int w = 0; w < 3; ++w) entries.push_back({std::abs(cosines(w, a)), a, w});
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& x, const Entry& y) { return x.magnitude > y.magnitude; });

  Orientation o;
  std::array<bool, 3> voxel_used{}, world_used{};
  for (const auto& e : entries) {
    if (voxel_used[e.voxel_axis] || world_used[e.world_axis]) continue;
    voxel_used[e.voxel_axis] = world_used[e.world_axis] = true;
    o.permutation[e.voxel_axis] = e.world_axis;
    o.sign[e.voxel_axis] = cosines(e.world_axis, e.voxel_axis) < 0 ? -1 : 1;
  }
  return o;
}

inline std::string orientation_string(const Orientation& o) {
  static const char pos[] = {'R', 'A', 'S'}, neg[] = {'L', 'P', 'I'};
  std::string s;
  for (int a = 0; a < 3; ++a) s += o.sign[a] > 0 ? pos[o.permutation[a]] : neg[o.permutation[a]];
  return s;
}

}  // namespace multiaxial::nifti
