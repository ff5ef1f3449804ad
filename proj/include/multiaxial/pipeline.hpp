#pragma once

// Whole-volume segmentation: slice a conformed volume along the three
// orthogonal axes, run one 2D U-Net per axis, fuse the three probability
// fields (majority vote or learned consensus layer), take the argmax,
// optionally post-process, and map labels back to the native grid.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiaxial/digest.hpp"
#include "multiaxial/image.hpp"
#include "multiaxial/nn/tensor.hpp"
#include "multiaxial/parallel.hpp"
#include "multiaxial/postprocess.hpp"
#include "multiaxial/unet.hpp"
#include "multiaxial/volume_core.hpp"
#include "multiaxial/weights.hpp"

namespace multiaxial {

/// Slicing axis; the value is the voxel axis held fixed within a slice.
enum class Axis { kSagittal = 0, kCoronal = 1, kAxial = 2 };

/// Order of the per-axis fields entering the consensus layer.
inline constexpr std::array<Axis, 3> kConsensusOrder{Axis::kAxial, Axis::kCoronal, Axis::kSagittal};

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::kSagittal: return "sagittal";
    case Axis::kCoronal: return "coronal";
    case Axis::kAxial: return "axial";
  }
  return "?";
}

inline Axis axis_from_name(const std::string& s) {
  if (s == "sagittal") return Axis::kSagittal;
  if (s == "coronal") return Axis::kCoronal;
  if (s == "axial") return Axis::kAxial;
  throw ConfigError("unknown axis '" + s + "' (expected axial, coronal or sagittal)");
}

/// In-plane (row, column) voxel axes of a slice: the two remaining axes in
/// ascending order.
inline std::array<int, 2> plane_axes(Axis a) {
  switch (a) {
    case Axis::kSagittal: return {1, 2};
    case Axis::kCoronal: return {0, 2};
    case Axis::kAxial: return {0, 1};
  }
  return {0, 1};
}

/// Normalized coordinate of voxel index i on an axis of n voxels, in [-1, 1].
inline float normalized_coord(std::int64_t i, std::int64_t n) {
  return n > 1 ? static_cast<float>(2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0) : 0.0f;
}

inline std::int64_t slice_count(const Index3& dims, Axis a) { return dims[static_cast<int>(a)]; }

/// Flat voxel index of in-plane position (r, c) on slice `s`.
inline std::size_t slice_voxel(const Index3& dims, Axis a, std::int64_t s, std::int64_t r, std::int64_t c) {
  Index3 v{};
  const auto pa = plane_axes(a);
  v[static_cast<int>(a)] = s;
  v[pa[0]] = r;
  v[pa[1]] = c;
  return static_cast<std::size_t>(v[0] + dims[0] * (v[1] + dims[1] * v[2]));
}

template <class T>
nn::Tensor<float> extract_slice(const Grid3<T>& grid, Axis a, std::int64_t s) {
  const auto pa = plane_axes(a);
  const auto H = grid.dims()[pa[0]], W = grid.dims()[pa[1]];
  if (s < 0 || s >= slice_count(grid.dims(), a)) throw RangeError("slice index out of range");
  nn::Tensor<float> t({1, H, W});
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) t.at(0, r, c) = static_cast<float>(grid[slice_voxel(grid.dims(), a, s, r, c)]);
  return t;
}

/// (x, y, z) coordinate planes of slice `s`, each normalized to [-1, 1].
inline nn::Tensor<float> slice_coords(const Index3& dims, Axis a, std::int64_t s) {
  const auto pa = plane_axes(a);
  const auto H = dims[pa[0]], W = dims[pa[1]];
  nn::Tensor<float> t({3, H, W});
  const int fixed = static_cast<int>(a);
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) {
      t.at(fixed, r, c) = normalized_coord(s, dims[fixed]);
      t.at(pa[0], r, c) = normalized_coord(r, dims[pa[0]]);
      t.at(pa[1], r, c) = normalized_coord(c, dims[pa[1]]);
    }
  return t;
}

template <class T>
void insert_slice(Grid3<T>& grid, Axis a, std::int64_t s, const nn::Tensor<float>& slice) {
  const auto pa = plane_axes(a);
  const auto H = grid.dims()[pa[0]], W = grid.dims()[pa[1]];
  if (slice.rank() != 3 || slice.channels() != 1 || slice.height() != H || slice.width() != W)
    throw ShapeError("insert_slice: slice shape " + nn::shape_string(slice.shape()) + " does not fit the grid");
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c) grid[slice_voxel(grid.dims(), a, s, r, c)] = static_cast<T>(slice.at(0, r, c));
}

struct SliceInput {
  nn::Tensor<float> image;
  nn::Tensor<float> coords;
  std::int64_t index = 0;
};

inline void require_conformed(const Index3& dims) {
  for (auto n : dims)
    if (n != kConformSize)
      throw ContractError("expected a conformed 256^3 volume, got " + std::to_string(dims[0]) + "x" +
                          std::to_string(dims[1]) + "x" + std::to_string(dims[2]));
}

/// All slices of a conformed volume along one axis, in index order.
inline std::vector<SliceInput> extract_slices(const Volume& vol, Axis a) {
  require_conformed(vol.dims());
  std::vector<SliceInput> out;
  for (std::int64_t s = 0; s < slice_count(vol.dims(), a); ++s)
    out.push_back({extract_slice(vol.grid, a, s), slice_coords(vol.dims(), a, s), s});
  return out;
}

/// Per-voxel class probabilities, channel-major: data[c * N + v].
struct ProbVolume {
  Index3 dims{0, 0, 0};
  int classes = kNumClasses;
  std::vector<float> data;
  Affine affine = Affine::Identity();
  std::string source;  // axial, coronal, sagittal or merged

  ProbVolume() = default;
  ProbVolume(Index3 d, int k, std::string src)
      : dims(d), classes(k), data(static_cast<std::size_t>(voxel_count(d) * k), 0.0f), source(std::move(src)) {}

  std::size_t voxels() const { return static_cast<std::size_t>(voxel_count(dims)); }
  float& at(int c, std::size_t v) { return data[c * voxels() + v]; }
  float at(int c, std::size_t v) const { return data[c * voxels() + v]; }
  const float* channel(int c) const { return data.data() + c * voxels(); }
};

/// Runs one per-axis model over every slice of `grid` along `axis`. Slices
/// are independent and write disjoint voxels, so the result does not depend
/// on the thread count.
inline ProbVolume infer_axis(const UNet<float>& net, const Grid3<float>& grid, Axis axis, int threads = 1) {
  const auto& dims = grid.dims();
  ProbVolume out(dims, net.config().classes, axis_name(axis));
  const auto pa = plane_axes(axis);
  const auto H = dims[pa[0]], W = dims[pa[1]];
  const std::size_t N = out.voxels();
  parallel_for(slice_count(dims, axis), threads, [&](std::int64_t s) {
    const auto probs = net.forward(extract_slice(grid, axis, s), slice_coords(dims, axis, s));
    for (int c = 0; c < out.classes; ++c)
      for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t col = 0; col < W; ++col)
          out.data[c * N + slice_voxel(dims, axis, s, r, col)] = probs.at(c, r, col);
  });
  return out;
}

inline void require_aligned(const ProbVolume& a, const ProbVolume& b, const ProbVolume& c) {
  if (a.dims != b.dims || a.dims != c.dims || a.classes != b.classes || a.classes != c.classes)
    throw ShapeError("probability fields are not aligned");
}

inline std::uint8_t argmax_voxel(const ProbVolume& p, std::size_t v) {
  int best = 0;
  for (int c = 1; c < p.classes; ++c)
    if (p.at(c, v) > p.at(best, v)) best = c;
  return static_cast<std::uint8_t>(best);
}

/// Per-voxel argmax; ties go to the lowest class code.
inline Grid3<std::uint8_t> argmax(const ProbVolume& p) {
  Grid3<std::uint8_t> out(p.dims);
  for (std::size_t v = 0; v < p.voxels(); ++v) out[v] = argmax_voxel(p, v);
  return out;
}

/// Summed probability (a + c) + s in float, the shared soft-vote score.
inline float soft_vote_score(const ProbVolume& a, const ProbVolume& c, const ProbVolume& s, int k, std::size_t v) {
  return (a.at(k, v) + c.at(k, v)) + s.at(k, v);
}

/// Argmax of the summed probabilities; ties to the lowest code.
inline Grid3<std::uint8_t> soft_vote(const ProbVolume& pa, const ProbVolume& pc, const ProbVolume& ps) {
  require_aligned(pa, pc, ps);
  Grid3<std::uint8_t> out(pa.dims);
  for (std::size_t v = 0; v < pa.voxels(); ++v) {
    int best = 0;
    float best_score = soft_vote_score(pa, pc, ps, 0, v);
    for (int k = 1; k < pa.classes; ++k) {
      const float sc = soft_vote_score(pa, pc, ps, k, v);
      if (sc > best_score) best = k, best_score = sc;
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Each model votes its argmax class; a class with two or more votes wins,
/// otherwise the soft-vote argmax decides.
inline Grid3<std::uint8_t> majority_vote(const ProbVolume& pa, const ProbVolume& pc, const ProbVolume& ps) {
  require_aligned(pa, pc, ps);
  Grid3<std::uint8_t> out(pa.dims);
  for (std::size_t v = 0; v < pa.voxels(); ++v) {
    const auto x = argmax_voxel(pa, v), y = argmax_voxel(pc, v), z = argmax_voxel(ps, v);
    if (x == y || x == z) {
      out[v] = x;
    } else if (y == z) {
      out[v] = y;
    } else {
      int best = 0;
      float best_score = soft_vote_score(pa, pc, ps, 0, v);
      for (int k = 1; k < pa.classes; ++k) {
        const float sc = soft_vote_score(pa, pc, ps, k, v);
        if (sc > best_score) best = k, best_score = sc;
      }
      out[v] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

/// Pointwise 21 -> 7 map over the concatenated (axial, coronal, sagittal)
/// probability fields, followed by a softmax.
struct ConsensusLayer {
  int classes = kNumClasses;
  nn::Tensor<float> weight;  // (classes, 3 * classes)
  std::vector<float> bias;   // empty: no bias

  /// [I I I]: logits equal the per-class probability sums.
  static ConsensusLayer diagonal(int classes = kNumClasses) {
    ConsensusLayer l;
    l.classes = classes;
    l.weight = nn::Tensor<float>({classes, 3 * classes});
    for (int m = 0; m < 3; ++m)
      for (int c = 0; c < classes; ++c) l.weight[c * 3 * classes + m * classes + c] = 1.0f;
    return l;
  }

  bool has_bias() const { return !bias.empty(); }

  /// Logit of class k from the 21 inputs, accumulated in channel order.
  float logit(int k, const float* x) const {
    float acc = has_bias() ? bias[k] : 0.0f;
    const float* w = weight.data() + k * 3 * classes;
    for (int j = 0; j < 3 * classes; ++j) acc += w[j] * x[j];
    return acc;
  }

  ModelWeights to_weights() const {
    ModelWeights w;
    w.kind = "consensus";
    w.metadata = {{"classes", classes},
                  {"models", 3},
                  {"channel_order", consensus_channel_order()},
                  {"has_bias", has_bias()},
                  {"softmax", true}};
    w.tensors.push_back({"consensus.weight", {classes, 3 * classes, 1, 1, 1}, weight.values()});
    if (has_bias()) w.tensors.push_back({"consensus.bias", {classes}, bias});
    return w;
  }

  static ConsensusLayer from_weights(const ModelWeights& w) {
    if (w.kind != "consensus") throw CompatibilityError("expected consensus weights, got '" + w.kind + "'");
    validate_weights(w);
    ConsensusLayer l;
    l.classes = w.metadata.value("classes", kNumClasses);
    const auto& t = w.tensor("consensus.weight");
    l.weight = nn::Tensor<float>({l.classes, 3 * l.classes}, t.data);
    if (w.metadata.value("has_bias", false)) l.bias = w.tensor("consensus.bias").data;
    return l;
  }
};

namespace detail {

inline void gather_inputs(const ProbVolume& pa, const ProbVolume& pc, const ProbVolume& ps, std::size_t v, float* x) {
  const int K = pa.classes;
  for (int k = 0; k < K; ++k) {
    x[k] = pa.at(k, v);
    x[K + k] = pc.at(k, v);
    x[2 * K + k] = ps.at(k, v);
  }
}

inline void check_consensus(const ConsensusLayer& layer, const ProbVolume& pa) {
  if (layer.classes != pa.classes)
    throw CompatibilityError("consensus layer has " + std::to_string(layer.classes) + " classes, fields have " +
                             std::to_string(pa.classes));
  if (layer.weight.shape() != nn::Shape{layer.classes, 3 * layer.classes})
    throw CompatibilityError("consensus weight has shape " + nn::shape_string(layer.weight.shape()));
}

}  // namespace detail

/// Merged probability field. Inputs are in consensus order (axial, coronal,
/// sagittal).
inline ProbVolume consensus_merge(const ConsensusLayer& layer, const ProbVolume& pa, const ProbVolume& pc,
                                  const ProbVolume& ps) {
  require_aligned(pa, pc, ps);
  detail::check_consensus(layer, pa);
  const int K = pa.classes;
  ProbVolume out(pa.dims, K, "merged");
  out.affine = pa.affine;
  std::vector<float> x(static_cast<std::size_t>(3 * K)), z(static_cast<std::size_t>(K));
  for (std::size_t v = 0; v < pa.voxels(); ++v) {
    detail::gather_inputs(pa, pc, ps, v, x.data());
    float mx = -std::numeric_limits<float>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, z[k] = layer.logit(k, x.data()));
    double sum = 0;
    for (int k = 0; k < K; ++k) sum += z[k] = std::exp(z[k] - mx);
    for (int k = 0; k < K; ++k) out.at(k, v) = static_cast<float>(z[k] / sum);
  }
  return out;
}

/// Argmax of the merged field, taken on the pre-softmax logits (the softmax
/// is monotone, and float rounding in exp could otherwise create ties).
inline Grid3<std::uint8_t> consensus_argmax(const ConsensusLayer& layer, const ProbVolume& pa, const ProbVolume& pc,
                                            const ProbVolume& ps, int threads = 1) {
  require_aligned(pa, pc, ps);
  detail::check_consensus(layer, pa);
  const int K = pa.classes;
  Grid3<std::uint8_t> out(pa.dims);
  const std::int64_t block = 1 << 16;
  const auto N = static_cast<std::int64_t>(pa.voxels());
  parallel_for((N + block - 1) / block, threads, [&](std::int64_t b) {
    std::vector<float> x(static_cast<std::size_t>(3 * K));
    for (std::int64_t v = b * block; v < std::min(N, (b + 1) * block); ++v) {
      detail::gather_inputs(pa, pc, ps, static_cast<std::size_t>(v), x.data());
      int best = 0;
      float best_z = layer.logit(0, x.data());
      for (int k = 1; k < K; ++k) {
        const float zk = layer.logit(k, x.data());
        if (zk > best_z) best = k, best_z = zk;
      }
      out[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
    }
  });
  return out;
}

/// The three per-axis models plus the consensus layer.
struct WeightBundle {
  ModelWeights axial, coronal, sagittal, consensus;
  nlohmann::json digests = nlohmann::json::object();  // role -> sha256 of the container

  const ModelWeights& model(Axis a) const {
    switch (a) {
      case Axis::kSagittal: return sagittal;
      case Axis::kCoronal: return coronal;
      case Axis::kAxial: return axial;
    }
    return axial;
  }
  ModelWeights& model(Axis a) { return const_cast<ModelWeights&>(std::as_const(*this).model(a)); }

  void validate() const {
    for (Axis a : kConsensusOrder) {
      const auto& w = model(a);
      if (w.kind != "unet") throw CompatibilityError(std::string(axis_name(a)) + " model is not a unet container");
      validate_weights(w);
    }
    validate_weights(consensus);
    const int k = consensus.metadata.value("classes", kNumClasses);
    for (Axis a : kConsensusOrder)
      if (model(a).metadata.at("config").at("classes").get<int>() != k)
        throw CompatibilityError(std::string(axis_name(a)) + " model class count differs from the consensus layer");
  }
};

inline const std::array<std::string, 4>& bundle_roles() {
  static const std::array<std::string, 4> roles{"axial", "coronal", "sagittal", "consensus"};
  return roles;
}

/// Writes one container per role plus `manifest.txt` ("role path sha256"
/// per line, paths relative to the manifest) into `dir`.
inline std::filesystem::path save_bundle(const WeightBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "# role path sha256\n";
  const std::array<const ModelWeights*, 4> models{&b.axial, &b.coronal, &b.sagittal, &b.consensus};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string file = bundle_roles()[i] + ".maxw";
    save_weights(*models[i], dir / file);
    manifest << bundle_roles()[i] << " " << file << " " << sha256_file(dir / file) << "\n";
  }
  const auto path = dir / "manifest.txt";
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << manifest.str();
  return path;
}

/// Loads a bundle from its manifest, verifying every digest.
inline WeightBundle load_bundle(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw IoError("cannot open weight manifest " + manifest.string());
  WeightBundle b;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string role, path, digest, extra;
    if (!(ls >> role >> path >> digest) || (ls >> extra))
      throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": expected 'role path sha256'");
    const auto resolved = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path)
                                                                     : manifest.parent_path() / path;
    const auto actual = sha256_file(resolved);
    if (actual != digest)
      throw CompatibilityError("digest mismatch for " + role + " weights " + resolved.string() + ": manifest " + digest +
                               ", file " + actual);
    ModelWeights* slot = nullptr;
    if (role == "axial") slot = &b.axial;
    else if (role == "coronal") slot = &b.coronal;
    else if (role == "sagittal") slot = &b.sagittal;
    else if (role == "consensus") slot = &b.consensus;
    else throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": unknown role '" + role + "'");
    if (b.digests.contains(role)) throw FormatError("weight manifest lists role '" + role + "' twice");
    *slot = load_weights(resolved);
    b.digests[role] = digest;
  }
  for (const auto& role : bundle_roles())
    if (!b.digests.contains(role)) throw FormatError("weight manifest lacks role '" + role + "'");
  b.validate();
  return b;
}

enum class MergeMode { kVote, kConsensus };

struct SegmentOptions {
  MergeMode merge = MergeMode::kConsensus;
  bool postprocess = true;
  postprocess::Config postprocess_config;
  int threads = 1;
};

struct SegmentResult {
  LabelVolume labels;                  // native grid
  Grid3<std::uint8_t> conformed_labels;
  ConformRecord record;
  postprocess::Report report;
  nlohmann::json provenance;
};

namespace detail {

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace detail

/// conform -> per-axis inference -> merge -> argmax -> postprocess ->
/// restore_native. Errors are rethrown as StageError tagged with the stage.
inline SegmentResult segment(const Volume& raw, const WeightBundle& bundle, const SegmentOptions& opt = {}) {
  SegmentResult res;
  auto conformed = detail::stage("conform", [&] { return conform(raw); });
  res.record = conformed.record;

  std::array<ProbVolume, 3> probs;
  for (std::size_t i = 0; i < 3; ++i) {
    const Axis a = kConsensusOrder[i];
    const std::string name = std::string("infer:") + axis_name(a);
    probs[i] = detail::stage(name.c_str(), [&] {
      const auto net = UNet<float>::from_weights(bundle.model(a));
      return infer_axis(net, conformed.volume.grid, a, opt.threads);
    });
  }
  conformed.volume.grid = Grid3<float>();

  res.conformed_labels = detail::stage("merge", [&] {
    if (opt.merge == MergeMode::kVote) return majority_vote(probs[0], probs[1], probs[2]);
    return consensus_argmax(ConsensusLayer::from_weights(bundle.consensus), probs[0], probs[1], probs[2],
                            opt.threads);
  });
  for (auto& p : probs) p = ProbVolume();

  if (opt.postprocess)
    res.report = detail::stage("postprocess", [&] { return postprocess::apply_all(res.conformed_labels, opt.postprocess_config); });

  res.labels = detail::stage("restore", [&] {
    LabelVolume conf;
    conf.grid = res.conformed_labels;
    return restore_native(conf, res.record);
  });
  res.labels.provenance = raw.provenance;
  res.provenance = {{"conform_record", res.record.to_json()},
                    {"p95", res.record.p95},
                    {"merge", opt.merge == MergeMode::kVote ? "vote" : "consensus"},
                    {"postprocess", opt.postprocess},
                    {"bundle_digests", bundle.digests}};
  if (opt.postprocess) {
    res.provenance["postprocess_report"] = {{"clear_external_air", res.report.external_air},
                                            {"fill_enclosed_background_as_bone", res.report.enclosed_background},
                                            {"relabel_bone_touching_brain", res.report.bone_near_brain},
                                            {"remove_small_components", res.report.small_components},
                                            {"iterations", res.report.iterations},
                                            {"converged", res.report.converged}};
  }
  res.labels.provenance.push_back({"segment", res.provenance});
  return res;
}

}  // namespace multiaxial
