#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "multiaxial/error.hpp"
#include "multiaxial/nn/tensor.hpp"

namespace multiaxial::nn {

struct AdamHyper {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments for one parameter tensor.
struct AdamMoments {
  std::vector<double> m, v;
};

/// Step count, hyperparameters and per-parameter moments.
struct AdamState {
  AdamHyper hyper;
  std::int64_t t = 0;
  std::vector<AdamMoments> moments;
};

/// Bias-corrected Adam update of one parameter tensor at step `t` (>= 1).
template <class T>
void adam_update(std::span<T> params, std::span<const T> grads, AdamMoments& mom, const AdamHyper& h,
                 std::int64_t t, std::string_view name = "parameter") {
  if (params.size() != grads.size())
    throw ShapeError("adam: " + std::string(name) + " has " + std::to_string(params.size()) + " values but " +
                     std::to_string(grads.size()) + " gradients");
  if (mom.m.size() != params.size()) {
    mom.m.assign(params.size(), 0.0);
    mom.v.assign(params.size(), 0.0);
  }
  for (const T g : grads)
    if (!std::isfinite(static_cast<double>(g)))
      throw OptimizerError("adam: non-finite gradient in " + std::string(name));
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    mom.m[i] = h.beta1 * mom.m[i] + (1.0 - h.beta1) * g;
    mom.v[i] = h.beta2 * mom.v[i] + (1.0 - h.beta2) * g * g;
    const double mh = mom.m[i] / c1, vh = mom.v[i] / c2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) - h.lr * mh / (std::sqrt(vh) + h.eps));
  }
}

/// One optimizer step over an ordered list of tensors. All gradients are
/// validated before any parameter is touched.
template <class T>
void adam_step(std::vector<Tensor<T>*> params, const std::vector<const Tensor<T>*>& grads, AdamState& state,
               const std::vector<std::string>& names = {}) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient list length mismatch");
  if (state.moments.size() != params.size()) state.moments.assign(params.size(), {});
  auto name_of = [&](std::size_t i) { return i < names.size() ? names[i] : "tensor #" + std::to_string(i); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape())
      throw ShapeError("adam: " + name_of(i) + " shape " + shape_string(params[i]->shape()) + " vs gradient " +
                       shape_string(grads[i]->shape()));
    for (const T g : grads[i]->values())
      if (!std::isfinite(static_cast<double>(g))) throw OptimizerError("adam: non-finite gradient in " + name_of(i));
  }
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i)
    adam_update<T>(params[i]->span(), grads[i]->span(), state.moments[i], state.hyper, state.t, name_of(i));
}

}  // namespace multiaxial::nn
