#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "multiaxial/nn/tensor.hpp"

namespace multiaxial::nn {

inline constexpr double kDiceEpsilon = 1e-6;

/// kInverseVolume: 1/n_c^2. kInverseCount: 1/n_c, which makes the loss
/// close to one minus the mean per-class Dice once predictions are good.
enum class DiceWeighting { kUniform, kInverseVolume, kInverseCount };

template <class T>
struct DiceLossResult {
  double loss = 0;
  Tensor<T> d_probs;
};

/// Per-class weights from the truth counts n_c = sum_v g_vc. Classes absent
/// from the truth get the largest finite weight.
template <class T>
std::vector<double> dice_class_weights(const Tensor<T>& truth, DiceWeighting mode) {
  const auto C = truth.channels(), P = truth.plane();
  std::vector<double> w(static_cast<std::size_t>(C), 1.0);
  if (mode == DiceWeighting::kUniform) return w;
  double wmax = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    double n = 0;
    for (std::int64_t p = 0; p < P; ++p) n += truth[c * P + p];
    if (n > 0)
      w[c] = mode == DiceWeighting::kInverseVolume ? 1.0 / (n * n) : 1.0 / n;
    else
      w[c] = std::numeric_limits<double>::infinity();
    if (std::isfinite(w[c])) wmax = std::max(wmax, w[c]);
  }
  for (auto& x : w)
    if (!std::isfinite(x)) x = wmax > 0 ? wmax : 1.0;
  return w;
}

/// Generalized Dice loss
///   1 - (2 sum_c w_c sum_v p_vc g_vc + eps) / (sum_c w_c sum_v (p_vc + g_vc) + eps)
/// and its gradient w.r.t. the probabilities. Sums are accumulated in double.
template <class T>
DiceLossResult<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& truth, const std::vector<double>& weights) {
  require_shape(probs.shape() == truth.shape(), "dice_loss", probs.shape(), truth.shape());
  const auto C = probs.channels(), P = probs.plane();
  if (static_cast<std::int64_t>(weights.size()) != C)
    throw ShapeError("dice_loss: " + std::to_string(weights.size()) + " class weights for " + std::to_string(C) +
                     " classes");
  double inter = 0, total = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    double ic = 0, tc = 0;
    const T* p = probs.data() + c * P;
    const T* g = truth.data() + c * P;
    for (std::int64_t v = 0; v < P; ++v) {
      ic += double(p[v]) * double(g[v]);
      tc += double(p[v]) + double(g[v]);
    }
    inter += weights[c] * ic;
    total += weights[c] * tc;
  }
  const double num = 2.0 * inter + kDiceEpsilon;
  const double den = total + kDiceEpsilon;
  DiceLossResult<T> r{1.0 - num / den, Tensor<T>(probs.shape())};
  const double den2 = den * den;
  for (std::int64_t c = 0; c < C; ++c) {
    const double a = -weights[c] * 2.0 / den, b = weights[c] * num / den2;
    const T* g = truth.data() + c * P;
    T* d = r.d_probs.data() + c * P;
    for (std::int64_t v = 0; v < P; ++v) d[v] = static_cast<T>(a * double(g[v]) + b);
  }
  return r;
}

/// Mean over the classes present in `truth` of the per-class soft Dice loss
///   1 - (1/|C+|) sum_{c in C+} (2 sum_v p_vc g_vc + eps) / (sum_v (p_vc + g_vc) + eps)
/// and its gradient. Absent classes get no gradient of their own.
template <class T>
DiceLossResult<T> mean_dice_loss(const Tensor<T>& probs, const Tensor<T>& truth) {
  require_shape(probs.shape() == truth.shape(), "mean_dice_loss", probs.shape(), truth.shape());
  const auto C = probs.channels(), P = probs.plane();
  DiceLossResult<T> r{0.0, Tensor<T>(probs.shape())};
  std::vector<double> inter(static_cast<std::size_t>(C), 0.0), total(static_cast<std::size_t>(C), 0.0);
  int present = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    double ic = 0, tc = 0, gc = 0;
    const T* p = probs.data() + c * P;
    const T* g = truth.data() + c * P;
    for (std::int64_t v = 0; v < P; ++v) {
      ic += double(p[v]) * double(g[v]);
      tc += double(p[v]) + double(g[v]);
      gc += double(g[v]);
    }
    inter[c] = ic;
    total[c] = gc > 0 ? tc : -1.0;
    present += gc > 0;
  }
  if (present == 0) throw ShapeError("mean_dice_loss: truth has no labeled voxels");
  double score = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    if (total[c] < 0) continue;
    const double num = 2.0 * inter[c] + kDiceEpsilon, den = total[c] + kDiceEpsilon;
    score += num / den;
    const double a = -2.0 / (den * present), b = num / (den * den * present);
    const T* g = truth.data() + c * P;
    T* d = r.d_probs.data() + c * P;
    for (std::int64_t v = 0; v < P; ++v) d[v] = static_cast<T>(a * double(g[v]) + b);
  }
  r.loss = 1.0 - score / present;
  return r;
}

/// Mean voxel cross-entropy -(1/P) sum_v sum_c g_vc log p_vc, probabilities
/// clamped below at 1e-7, and its gradient w.r.t. the probabilities. With
/// `balanced` each present class c is weighted 1/(K G_c) instead of 1/P, K
/// being the number of present classes and G_c the class volume, so the loss
/// is the mean over present classes of the per-class mean cross-entropy.
template <class T>
DiceLossResult<T> cross_entropy_loss(const Tensor<T>& probs, const Tensor<T>& truth, bool balanced = false) {
  require_shape(probs.shape() == truth.shape(), "cross_entropy_loss", probs.shape(), truth.shape());
  const auto C = probs.channels(), P = probs.plane();
  if (P == 0) throw ShapeError("cross_entropy_loss: empty input");
  std::vector<double> w(static_cast<std::size_t>(C), 1.0 / double(P));
  if (balanced) {
    std::vector<double> vol(static_cast<std::size_t>(C), 0.0);
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t v = 0; v < P; ++v) vol[static_cast<std::size_t>(c)] += truth[c * P + v];
    const auto K = std::count_if(vol.begin(), vol.end(), [](double g) { return g > 0; });
    for (std::size_t c = 0; c < vol.size(); ++c) w[c] = vol[c] > 0 ? 1.0 / (double(K) * vol[c]) : 0.0;
  }
  DiceLossResult<T> r{0.0, Tensor<T>(probs.shape())};
  double sum = 0;
  for (std::int64_t i = 0; i < C * P; ++i) {
    const double g = truth[i];
    if (g == 0) continue;
    const double wc = w[static_cast<std::size_t>(i / P)];
    const double p = std::max(double(probs[i]), 1e-7);
    sum -= wc * g * std::log(p);
    r.d_probs[i] = static_cast<T>(-wc * g / p);
  }
  r.loss = sum;
  return r;
}

template <class T>
DiceLossResult<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& truth, DiceWeighting mode = DiceWeighting::kUniform) {
  return dice_loss(probs, truth, dice_class_weights(truth, mode));
}

/// One-hot encoding of integer codes into a (classes, ...) tensor with the
/// given spatial shape.
template <class T, class Code>
Tensor<T> one_hot(const std::vector<Code>& codes, std::int64_t classes, Shape spatial) {
  Shape s{classes};
  s.insert(s.end(), spatial.begin(), spatial.end());
  Tensor<T> t(s);
  const auto P = static_cast<std::int64_t>(codes.size());
  if (element_count(spatial) != P) throw ShapeError("one_hot: code count does not match spatial shape");
  for (std::int64_t v = 0; v < P; ++v) {
    const auto c = static_cast<std::int64_t>(codes[v]);
    if (c < 0 || c >= classes) throw RangeError("one_hot: code " + std::to_string(c) + " out of range");
    t[static_cast<std::size_t>(c * P + v)] = T{1};
  }
  return t;
}

}  // namespace multiaxial::nn
