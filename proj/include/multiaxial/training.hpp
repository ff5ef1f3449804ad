#pragma once

// Desk-scale training: subject splits, slice datasets, 2D augmentation,
// per-axis U-Net training and consensus-layer training.

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiaxial/evaluation.hpp"
#include "multiaxial/nn/adam.hpp"
#include "multiaxial/nn/dice_loss.hpp"
#include "multiaxial/parallel.hpp"
#include "multiaxial/pipeline.hpp"
#include "multiaxial/unet.hpp"

namespace multiaxial::train {

// ---------------------------------------------------------------------------
// Splits

struct SplitPlan {
  std::vector<int> train, validation, test;  // subject indices
  std::uint64_t seed = 0;
  int fold = 0;

  nlohmann::json to_json() const {
    return {{"seed", seed}, {"fold", fold}, {"train", train}, {"validation", validation}, {"test", test}};
  }
};

/// Seeded shuffle of 0..n-1, rotated by fold * test size so successive
/// folds hold out different subjects, then partitioned train/val/test.
inline SplitPlan make_splits(int n, std::array<int, 3> sizes, std::uint64_t seed, int fold = 0) {
  if (sizes[0] < 0 || sizes[1] < 0 || sizes[2] < 0 || sizes[0] + sizes[1] + sizes[2] != n)
    throw ConfigError("split sizes " + std::to_string(sizes[0]) + "+" + std::to_string(sizes[1]) + "+" +
                      std::to_string(sizes[2]) + " do not sum to " + std::to_string(n));
  if (fold < 0) throw ConfigError("fold must be nonnegative");
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  nn::shuffle(ids.begin(), ids.end(), rng);
  if (n > 0) std::rotate(ids.begin(), ids.begin() + (static_cast<std::int64_t>(fold) * sizes[2]) % n, ids.end());
  SplitPlan p;
  p.seed = seed;
  p.fold = fold;
  p.train.assign(ids.begin(), ids.begin() + sizes[0]);
  p.validation.assign(ids.begin() + sizes[0], ids.begin() + sizes[0] + sizes[1]);
  p.test.assign(ids.begin() + sizes[0] + sizes[1], ids.end());
  return p;
}

// ---------------------------------------------------------------------------
// Slice datasets

struct Subject {
  std::string id;
  Volume image;        // conformed
  LabelVolume labels;  // same grid
};

/// One training slice. Labels are stored as class codes; one_hot() yields
/// the (classes, H, W) indicator tensor.
struct SliceSample {
  nn::Tensor<float> image;   // (1, H, W)
  nn::Tensor<float> coords;  // (3, H, W)
  std::vector<std::uint8_t> labels;
  std::string subject;
  Axis axis = Axis::kAxial;
  std::int64_t index = 0;

  nn::Tensor<float> one_hot(int classes = kNumClasses) const {
    return nn::one_hot<float>(labels, classes, {image.height(), image.width()});
  }
};

/// Slices along `axis` whose labels are not entirely background, ordered by
/// (subject, index).
inline std::vector<SliceSample> slice_dataset(const std::vector<Subject>& subjects, Axis axis,
                                              std::vector<std::string>* warnings = nullptr) {
  std::vector<SliceSample> out;
  for (const auto& s : subjects) {
    if (s.image.dims() != s.labels.dims() || !same_geometry(s.image, s.labels, 1e-4))
      throw PairingError("subject " + s.id + ": image and label geometry differ");
    std::size_t kept = 0;
    for (std::int64_t i = 0; i < slice_count(s.image.dims(), axis); ++i) {
      const auto lab = extract_slice(s.labels.grid, axis, i);
      if (std::all_of(lab.values().begin(), lab.values().end(), [](float v) { return v == 0.0f; })) continue;
      SliceSample smp{extract_slice(s.image.grid, axis, i), slice_coords(s.image.dims(), axis, i), {}, s.id, axis, i};
      smp.labels.assign(lab.values().begin(), lab.values().end());
      out.push_back(std::move(smp));
      ++kept;
    }
    if (kept == 0 && warnings) warnings->push_back("subject " + s.id + " has no non-background slices");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  double probability = 0.5;
  double max_rotation_deg = 15;
  double max_shear = std::tan(15.0 * M_PI / 180.0);
};

/// Rotation by `theta` (radians) followed by shear x' = x + s*y, about the
/// slice center. Image: bilinear, zero fill; labels: nearest, background
/// fill; in-plane coordinate planes follow the same map; the off-plane
/// plane is untouched.
inline SliceSample augment_with(const SliceSample& in, double theta, double shear) {
  if (theta == 0.0 && shear == 0.0) return in;
  const auto H = in.image.height(), W = in.image.width();
  const double cr = 0.5 * static_cast<double>(H - 1), cc = 0.5 * static_cast<double>(W - 1);
  // Forward map on (row, col) offsets: A = S * R; sources use A^-1.
  const double c = std::cos(theta), s = std::sin(theta);
  const double r00 = c, r01 = -s, r10 = s, r11 = c;
  const double a00 = r00 + shear * r10, a01 = r01 + shear * r11, a10 = r10, a11 = r11;
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;

  SliceSample out = in;
  const auto pa = plane_axes(in.axis);
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t q = 0; q < W; ++q) {
      const double dr = static_cast<double>(r) - cr, dq = static_cast<double>(q) - cc;
      const double sr = cr + i00 * dr + i01 * dq, sq = cc + i10 * dr + i11 * dq;
      // Bilinear image sample.
      const auto r0 = static_cast<std::int64_t>(std::floor(sr)), q0 = static_cast<std::int64_t>(std::floor(sq));
      const double fr = sr - static_cast<double>(r0), fq = sq - static_cast<double>(q0);
      double acc = 0;
      for (int u = 0; u < 2; ++u)
        for (int v = 0; v < 2; ++v) {
          const auto rr = r0 + u, qq = q0 + v;
          if (rr < 0 || rr >= H || qq < 0 || qq >= W) continue;
          acc += (u ? fr : 1 - fr) * (v ? fq : 1 - fq) * in.image.at(0, rr, qq);
        }
      out.image.at(0, r, q) = static_cast<float>(acc);
      // Nearest label.
      const auto nr = static_cast<std::int64_t>(std::floor(sr + 0.5)), nq = static_cast<std::int64_t>(std::floor(sq + 0.5));
      out.labels[static_cast<std::size_t>(r * W + q)] =
          (nr >= 0 && nr < H && nq >= 0 && nq < W) ? in.labels[static_cast<std::size_t>(nr * W + nq)] : kBackground;
      // Coordinates of the source position.
      out.coords.at(pa[0], r, q) = static_cast<float>(2.0 * sr / static_cast<double>(H - 1) - 1.0);
      out.coords.at(pa[1], r, q) = static_cast<float>(2.0 * sq / static_cast<double>(W - 1) - 1.0);
    }
  return out;
}

/// With probability cfg.probability, a uniform rotation in
/// [-max_rotation, max_rotation] and shear in [-max_shear, max_shear].
inline SliceSample augment(const SliceSample& in, std::mt19937_64& rng, const AugmentConfig& cfg = {}) {
  const double gate = nn::uniform01(rng);
  const double theta = nn::uniform(rng, -1, 1) * cfg.max_rotation_deg * M_PI / 180.0;
  const double shear = nn::uniform(rng, -1, 1) * cfg.max_shear;
  if (!cfg.enabled || gate >= cfg.probability) return in;
  return augment_with(in, theta, shear);
}

/// Square window of `size` starting at (r0, c0). Coordinate planes keep
/// their full-slice values.
inline SliceSample crop_sample(const SliceSample& in, std::int64_t r0, std::int64_t c0, std::int64_t size) {
  const auto H = in.image.height(), W = in.image.width();
  if (size < 1 || r0 < 0 || c0 < 0 || r0 + size > H || c0 + size > W)
    throw ContractError("crop window outside the slice");
  SliceSample out{nn::Tensor<float>({1, size, size}), nn::Tensor<float>({3, size, size}),
                  std::vector<std::uint8_t>(static_cast<std::size_t>(size * size)), in.subject, in.axis, in.index};
  for (std::int64_t r = 0; r < size; ++r)
    for (std::int64_t q = 0; q < size; ++q) {
      out.image.at(0, r, q) = in.image.at(0, r0 + r, c0 + q);
      for (std::int64_t a = 0; a < 3; ++a) out.coords.at(a, r, q) = in.coords.at(a, r0 + r, c0 + q);
      out.labels[static_cast<std::size_t>(r * size + q)] = in.labels[static_cast<std::size_t>((r0 + r) * W + c0 + q)];
    }
  return out;
}

/// Crop of `size` centred, as far as the borders allow, on a voxel of a
/// foreground class drawn uniformly from those present in the slice.
inline SliceSample random_crop(const SliceSample& in, std::int64_t size, std::mt19937_64& rng) {
  const auto H = in.image.height(), W = in.image.width();
  std::vector<std::vector<std::int64_t>> by_class(kNumClasses);
  for (std::size_t v = 0; v < in.labels.size(); ++v)
    if (in.labels[v] != kBackground && in.labels[v] < kNumClasses) by_class[in.labels[v]].push_back(static_cast<std::int64_t>(v));
  std::vector<const std::vector<std::int64_t>*> present;
  for (const auto& c : by_class)
    if (!c.empty()) present.push_back(&c);
  const double u1 = nn::uniform01(rng), u2 = nn::uniform01(rng);
  std::int64_t cr = H / 2, cq = W / 2;
  if (!present.empty()) {
    const auto pick = [](double u, std::size_t n) { return std::min(n - 1, static_cast<std::size_t>(u * static_cast<double>(n))); };
    const auto& c = *present[pick(u1, present.size())];
    const auto v = c[pick(u2, c.size())];
    cr = v / W;
    cq = v % W;
  }
  const auto r0 = std::clamp<std::int64_t>(cr - size / 2, 0, H - size);
  const auto c0 = std::clamp<std::int64_t>(cq - size / 2, 0, W - size);
  return crop_sample(in, r0, c0, size);
}

// ---------------------------------------------------------------------------
// Per-axis training

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double val_dice = std::numeric_limits<double>::quiet_NaN();
};

/// kPooled treats the whole batch as one Dice region; kPerSample averages
/// the losses of individual slices.
enum class BatchLoss { kPooled, kPerSample };

/// kGeneralized: one weighted Dice ratio over all classes. kClassMean: the
/// mean of per-class Dice ratios.
enum class DiceForm { kGeneralized, kClassMean };

struct TrainConfig {
  int epochs = 0;
  int batch_size = 8;
  double lr = 1e-5;
  std::uint64_t seed = 0;
  AugmentConfig augment{false};
  nn::DiceWeighting weighting = nn::DiceWeighting::kUniform;
  BatchLoss batch_loss = BatchLoss::kPooled;
  DiceForm dice_form = DiceForm::kGeneralized;
  int warmup_steps = 0;  // linear ramp of the learning rate from 0
  bool cosine_decay = false;  // cosine decay to 0 over the remaining steps
  double ce_weight = 0;  // weight of an added voxel cross-entropy term
  bool ce_balanced = false;  // class-balanced cross-entropy
  int crop = 0;  // train on random foreground-centred crops of this size; 0: whole slices
  int patience = 0;  // 0: no early stopping
  int threads = 1;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ModelWeights weights;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool stopped_early = false;
};

/// Pooled per-class Dice of argmax predictions over a set of slices, then
/// the mean over classes present in prediction or truth.
inline double slice_dice(const UNet<float>& net, const std::vector<SliceSample>& samples, int threads = 1) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  const int K = net.config().classes;
  std::vector<eval::DiceCounts> parts(samples.size());
  parallel_for(static_cast<std::int64_t>(samples.size()), threads, [&](std::int64_t i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    const auto p = net.forward(s.image, s.coords);
    const auto P = static_cast<std::size_t>(p.plane());
    Grid3<std::uint8_t> pred({static_cast<std::int64_t>(P), 1, 1}), truth({static_cast<std::int64_t>(P), 1, 1});
    for (std::size_t v = 0; v < P; ++v) {
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (p[k * P + v] > p[best * P + v]) best = k;
      pred[v] = static_cast<std::uint8_t>(best);
      truth[v] = s.labels[v];
    }
    parts[static_cast<std::size_t>(i)] = eval::count_overlap(pred, truth, K - 1);
  });
  eval::DiceCounts total{std::vector<std::int64_t>(K), std::vector<std::int64_t>(K), std::vector<std::int64_t>(K)};
  for (const auto& c : parts)
    for (int k = 0; k < K; ++k) {
      total.pred[k] += c.pred[k];
      total.truth[k] += c.truth[k];
      total.both[k] += c.both[k];
    }
  std::vector<eval::Score> scores;
  for (int k = 0; k < K; ++k) scores.push_back(eval::dice_from_counts(total, k));
  return eval::subject_score(scores);
}

/// Mini-batch Dice-loss training with Adam. The sample order and
/// augmentation draws come from `cfg.seed`, and gradients are reduced in a
/// fixed order, so results do not depend on `cfg.threads`. Denormals are
/// flushed to zero for the duration.
inline TrainResult train_axis_model(const UNetConfig& config, const std::vector<SliceSample>& samples,
                                    const std::vector<SliceSample>& validation, const TrainConfig& cfg) {
  if (samples.empty()) throw TrainingError("no training samples");
  if (cfg.epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (cfg.batch_size < 1) throw ConfigError("batch size must be positive");
  if (cfg.crop < 0 || cfg.crop % (1 << config.depth) != 0)
    throw ConfigError("crop size " + std::to_string(cfg.crop) + " must be a multiple of 2^depth");
  FlushDenormals ftz;
  auto loss_of = [&](const nn::Tensor<float>& p, const nn::Tensor<float>& t) {
    auto r = cfg.dice_form == DiceForm::kClassMean ? nn::mean_dice_loss(p, t) : nn::dice_loss(p, t, cfg.weighting);
    if (cfg.ce_weight > 0) {
      const auto ce = nn::cross_entropy_loss(p, t, cfg.ce_balanced);
      r.loss += cfg.ce_weight * ce.loss;
      for (std::size_t i = 0; i < r.d_probs.size(); ++i)
        r.d_probs[i] += static_cast<float>(cfg.ce_weight) * ce.d_probs[i];
    }
    return r;
  };
  UNet<float> net(config);
  TrainResult res;
  if (cfg.epochs == 0) {
    res.weights = net.to_weights();
    return res;
  }
  nn::AdamState adam;
  adam.hyper.lr = cfg.lr;
  const auto names = net.parameter_names();
  const auto batches = static_cast<std::int64_t>((samples.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                                 static_cast<std::size_t>(cfg.batch_size));
  const std::int64_t total_steps = batches * cfg.epochs;
  auto lr_at = [&](std::int64_t step) {  // step counts from 1
    if (step <= cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (!cfg.cosine_decay) return cfg.lr;
    const double t = static_cast<double>(step - cfg.warmup_steps) /
                     static_cast<double>(std::max<std::int64_t>(1, total_steps - cfg.warmup_steps));
    return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
  };
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  double best_val = -1;
  std::vector<nn::Tensor<float>> best_params = net.parameters();
  int since_best = 0;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    nn::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t B = end - start;
      std::vector<SliceSample> batch;
      for (std::size_t b = start; b < end; ++b) {
        auto smp = augment(samples[order[b]], rng, cfg.augment);
        if (cfg.crop > 0 && cfg.crop < std::min(smp.image.height(), smp.image.width()))
          smp = random_crop(smp, cfg.crop, rng);
        batch.push_back(std::move(smp));
      }
      std::vector<std::vector<nn::Tensor<float>>> grads(B);
      std::vector<double> losses(B);
      if (cfg.batch_loss == BatchLoss::kPerSample) {
        parallel_for(static_cast<std::int64_t>(B), cfg.threads, [&](std::int64_t b) {
          UNet<float>::Trace tr;
          const auto& s = batch[static_cast<std::size_t>(b)];
          const auto truth = s.one_hot(config.classes);
          const auto r = loss_of(net.forward(s.image, s.coords, tr), truth);
          losses[static_cast<std::size_t>(b)] = r.loss;
          grads[static_cast<std::size_t>(b)] = net.backward(tr, r.d_probs);
        });
      } else {
        const auto K = static_cast<std::size_t>(config.classes);
        std::vector<UNet<float>::Trace> traces(B);
        std::vector<nn::Tensor<float>> probs(B);
        parallel_for(static_cast<std::int64_t>(B), cfg.threads, [&](std::int64_t b) {
          const auto& s = batch[static_cast<std::size_t>(b)];
          probs[static_cast<std::size_t>(b)] = net.forward(s.image, s.coords, traces[static_cast<std::size_t>(b)]);
        });
        std::vector<std::size_t> offset(B + 1, 0);
        for (std::size_t b = 0; b < B; ++b) offset[b + 1] = offset[b] + static_cast<std::size_t>(probs[b].plane());
        const auto total = offset[B];
        nn::Tensor<float> all({static_cast<std::int64_t>(K), static_cast<std::int64_t>(total)});
        nn::Tensor<float> truth({static_cast<std::int64_t>(K), static_cast<std::int64_t>(total)});
        for (std::size_t b = 0; b < B; ++b) {
          const auto P = offset[b + 1] - offset[b];
          for (std::size_t v = 0; v < P; ++v) {
            for (std::size_t k = 0; k < K; ++k) all[k * total + offset[b] + v] = probs[b][k * P + v];
            truth[batch[b].labels[v] * total + offset[b] + v] = 1.0f;
          }
        }
        const auto r = loss_of(all, truth);
        for (std::size_t b = 0; b < B; ++b) losses[b] = r.loss;
        parallel_for(static_cast<std::int64_t>(B), cfg.threads, [&](std::int64_t bi) {
          const auto b = static_cast<std::size_t>(bi);
          const auto P = offset[b + 1] - offset[b];
          nn::Tensor<float> d(probs[b].shape());
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t v = 0; v < P; ++v) d[k * P + v] = r.d_probs[k * total + offset[b] + v];
          grads[b] = net.backward(traces[b], d);
        });
      }
      ++step;
      for (double l : losses)
        if (!std::isfinite(l)) throw TrainingError("non-finite loss at step " + std::to_string(step));
      auto& sum = grads[0];
      for (std::size_t b = 1; b < B; ++b)
        for (std::size_t p = 0; p < sum.size(); ++p)
          for (std::size_t i = 0; i < sum[p].size(); ++i) sum[p][i] += grads[b][p][i];
      if (cfg.batch_loss == BatchLoss::kPerSample) {
        const float scale = 1.0f / static_cast<float>(B);
        for (auto& g : sum)
          for (auto& v : g.values()) v *= scale;
      }
      std::vector<nn::Tensor<float>*> params;
      std::vector<const nn::Tensor<float>*> gptr;
      for (std::size_t p = 0; p < sum.size(); ++p) {
        params.push_back(&net.parameters()[p]);
        gptr.push_back(&sum[p]);
      }
      try {
        adam.hyper.lr = lr_at(step);
        nn::adam_step<float>(params, gptr, adam, names);
      } catch (const OptimizerError& e) {
        throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step));
      }
      for (double l : losses) loss_sum += l;
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(samples.size())};
    if (!validation.empty()) rec.val_dice = slice_dice(net, validation, cfg.threads);
    res.history.push_back(rec);
    if (cfg.on_epoch) cfg.on_epoch(rec);
    if (cfg.patience > 0 && !validation.empty()) {
      if (rec.val_dice > best_val) {
        best_val = rec.val_dice;
        best_params = net.parameters();
        res.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        res.stopped_early = true;
        break;
      }
    }
  }
  if (cfg.patience > 0 && !validation.empty()) {
    net.parameters() = best_params;
  } else {
    res.best_epoch = static_cast<int>(res.history.size());
  }
  res.weights = net.to_weights();
  return res;
}

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  os << "epoch,loss,val_dice\n";
  for (const auto& r : h)
    os << r.epoch << "," << eval::detail::fmt6(r.loss) << ","
       << (std::isnan(r.val_dice) ? std::string("NA") : eval::detail::fmt6(r.val_dice)) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Consensus layer

/// Per-voxel inputs (21 channels in consensus order) and truth codes.
struct ConsensusSamples {
  int classes = kNumClasses;
  std::vector<float> x;  // (3 * classes) x N, channel-major
  std::vector<std::uint8_t> truth;

  std::size_t size() const { return truth.size(); }
};

/// Gathers every `stride`-th voxel (per axis) inside the bounding box of
/// non-background truth grown by `margin`, appending to `out`. The phase
/// of the stride grid is drawn from `seed`.
inline void gather_consensus_samples(const ProbVolume& pa, const ProbVolume& pc, const ProbVolume& ps,
                                     const Grid3<std::uint8_t>& truth, ConsensusSamples& out, int stride = 4,
                                     int margin = 4, std::uint64_t seed = 0) {
  require_aligned(pa, pc, ps);
  if (truth.dims() != pa.dims) throw ShapeError("consensus samples: truth grid does not match probability fields");
  if (stride < 1) throw ConfigError("stride must be positive");
  const int K = pa.classes;
  out.classes = K;
  Index3 lo = truth.dims(), hi{-1, -1, -1};
  for (std::int64_t k = 0; k < truth.nz(); ++k)
    for (std::int64_t j = 0; j < truth.ny(); ++j)
      for (std::int64_t i = 0; i < truth.nx(); ++i)
        if (truth(i, j, k) != kBackground) {
          const Index3 p{i, j, k};
          for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]), hi[a] = std::max(hi[a], p[a]);
        }
  if (hi[0] < 0) lo = {0, 0, 0}, hi = {truth.nx() - 1, truth.ny() - 1, truth.nz() - 1};
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max<std::int64_t>(0, lo[a] - margin);
    hi[a] = std::min<std::int64_t>(truth.dims()[a] - 1, hi[a] + margin);
  }
  std::mt19937_64 rng(seed);
  std::array<std::int64_t, 3> phase{};
  for (auto& p : phase) p = static_cast<std::int64_t>(nn::uniform_index(rng, static_cast<std::uint64_t>(stride)));
  std::vector<std::size_t> voxels;
  for (std::int64_t k = lo[2] + phase[2]; k <= hi[2]; k += stride)
    for (std::int64_t j = lo[1] + phase[1]; j <= hi[1]; j += stride)
      for (std::int64_t i = lo[0] + phase[0]; i <= hi[0]; i += stride) voxels.push_back(truth.index(i, j, k));
  // Re-pack channel-major with the new voxels appended.
  const std::size_t old_n = out.size(), n = old_n + voxels.size();
  std::vector<float> x(static_cast<std::size_t>(3 * K) * n);
  for (int ch = 0; ch < 3 * K; ++ch)
    std::copy(out.x.begin() + static_cast<std::ptrdiff_t>(ch * old_n),
              out.x.begin() + static_cast<std::ptrdiff_t>((ch + 1) * old_n), x.begin() + static_cast<std::ptrdiff_t>(ch * n));
  const std::array<const ProbVolume*, 3> src{&pa, &pc, &ps};
  for (std::size_t t = 0; t < voxels.size(); ++t) {
    for (int m = 0; m < 3; ++m)
      for (int k = 0; k < K; ++k) x[(m * K + k) * n + old_n + t] = src[m]->at(k, voxels[t]);
    out.truth.push_back(truth[voxels[t]]);
  }
  out.x = std::move(x);
}

/// Mean over classes of the Dice of argmax(logits) against the truth.
inline double consensus_dice(const ConsensusLayer& layer, const ConsensusSamples& s) {
  const int K = s.classes;
  const std::size_t N = s.size();
  Grid3<std::uint8_t> pred({static_cast<std::int64_t>(std::max<std::size_t>(N, 1)), 1, 1});
  Grid3<std::uint8_t> truth(pred.dims());
  std::vector<float> x(static_cast<std::size_t>(3 * K));
  for (std::size_t v = 0; v < N; ++v) {
    for (int ch = 0; ch < 3 * K; ++ch) x[ch] = s.x[ch * N + v];
    int best = 0;
    float bz = layer.logit(0, x.data());
    for (int k = 1; k < K; ++k) {
      const float z = layer.logit(k, x.data());
      if (z > bz) best = k, bz = z;
    }
    pred[v] = static_cast<std::uint8_t>(best);
    truth[v] = s.truth[v];
  }
  if (N == 0) return std::numeric_limits<double>::quiet_NaN();
  const auto c = eval::count_overlap(pred, truth, K - 1);
  std::vector<eval::Score> scores;
  for (int k = 0; k < K; ++k) scores.push_back(eval::dice_from_counts(c, k));
  return eval::subject_score(scores);
}

struct ConsensusTrainConfig {
  int epochs = 3000;
  double lr = 1e-5;
  bool bias = false;
  nn::DiceWeighting weighting = nn::DiceWeighting::kUniform;
  std::function<void(int epoch, double loss)> on_epoch;
};

struct ConsensusTrainResult {
  ConsensusLayer layer;
  std::vector<double> loss_history;
  double initial_val_dice = 0;
  double final_val_dice = 0;
  bool reverted = false;  // training regressed validation Dice; diagonal returned
};

/// Full-batch Dice + Adam from the diagonal (vote-equivalent) start. Each
/// epoch is one pass over all cached samples. If validation Dice ends below
/// its value at initialization, the initialization is returned.
inline ConsensusTrainResult train_consensus(const ConsensusSamples& train, const ConsensusSamples& validation,
                                            const ConsensusTrainConfig& cfg = {}) {
  const int K = train.classes;
  const auto N = static_cast<std::int64_t>(train.size());
  if (N == 0) throw TrainingError("no consensus training samples");
  if (train.x.size() != static_cast<std::size_t>(3 * K * N) || validation.classes != K)
    throw ShapeError("consensus samples are misaligned");
  const ConsensusLayer init = ConsensusLayer::diagonal(K);
  ConsensusTrainResult res;
  res.layer = init;
  if (cfg.bias) res.layer.bias.assign(static_cast<std::size_t>(K), 0.0f);
  res.initial_val_dice = consensus_dice(init, validation);

  const nn::Tensor<float> x({3 * K, N}, train.x);
  const auto truth = nn::one_hot<float>(train.truth, K, {N});
  nn::Tensor<float> w = res.layer.weight;
  nn::Tensor<float> b = cfg.bias ? nn::Tensor<float>({K}) : nn::Tensor<float>();
  nn::AdamState adam;
  adam.hyper.lr = cfg.lr;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto logits = nn::pointwise_conv(x, w, b);
    const auto probs = nn::softmax_channels(logits);
    const auto r = nn::dice_loss(probs, truth, cfg.weighting);
    if (!std::isfinite(r.loss)) throw TrainingError("non-finite consensus loss at epoch " + std::to_string(epoch));
    const auto d_logits = nn::softmax_channels_backward(probs, r.d_probs);
    const auto g = nn::pointwise_conv_backward(x, w, cfg.bias, d_logits);
    if (cfg.bias)
      nn::adam_step<float>({&w, &b}, {&g.d_weight, &g.d_bias}, adam, {"consensus.weight", "consensus.bias"});
    else
      nn::adam_step<float>({&w}, {&g.d_weight}, adam, {"consensus.weight"});
    res.loss_history.push_back(r.loss);
    if (cfg.on_epoch) cfg.on_epoch(epoch, r.loss);
  }
  res.layer.weight = w;
  if (cfg.bias) res.layer.bias = b.values();
  res.final_val_dice = consensus_dice(res.layer, validation);
  if (res.final_val_dice < res.initial_val_dice) {
    res.layer = init;
    res.final_val_dice = res.initial_val_dice;
    res.reverted = true;
  }
  return res;
}

}  // namespace multiaxial::train
