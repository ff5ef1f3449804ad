#pragma once

// Per-axis 2D U-Net: `depth` encoder blocks (conv3x3+relu twice, 2x2 max
// pool), `depth` decoder blocks (2x2 stride-2 transposed conv, concat with
// the matching encoder output, conv3x3+relu twice), and a 1x1 head with a
// channel softmax. Coordinate planes are concatenated to the inputs of the
// last 3x3 conv and of the head.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "multiaxial/nn/layers.hpp"
#include "multiaxial/nn/tensor.hpp"
#include "multiaxial/unet_config.hpp"
#include "multiaxial/weights.hpp"

namespace multiaxial {

template <class T>
class UNet {
 public:
  using Tensor = nn::Tensor<T>;

  /// Everything the backward pass needs from a forward pass.
  struct Trace {
    std::vector<Tensor> enc_in, enc_a1, enc_a2;
    std::vector<std::vector<std::int64_t>> pool_argmax;
    std::vector<Tensor> up_in, cat, dec_b1, dec_in2, dec_b2;
    Tensor head_in, probs;
  };

  explicit UNet(const UNetConfig& cfg) : cfg_(cfg), layers_(layer_manifest(cfg)) {
    std::mt19937_64 rng(cfg.seed);
    for (const auto& l : layers_) {
      Tensor w({l.out_channels, l.in_channels, l.kernel, l.kernel});
      const double limit = std::sqrt(6.0 / static_cast<double>(l.in_channels * l.kernel * l.kernel));
      for (auto& v : w.values()) v = static_cast<T>(nn::uniform(rng, -limit, limit));
      params_.push_back(std::move(w));
      params_.push_back(Tensor({l.out_channels}));
    }
  }

  static UNet from_weights(const ModelWeights& w) {
    if (w.kind != "unet") throw CompatibilityError("expected unet weights, got '" + w.kind + "'");
    validate_weights(w);
    UNet net(UNetConfig::from_json(w.metadata.at("config")));
    for (std::size_t i = 0; i < net.params_.size(); ++i)
      net.params_[i] = Tensor(w.tensors[i].shape, std::vector<T>(w.tensors[i].data.begin(), w.tensors[i].data.end()));
    return net;
  }

  ModelWeights to_weights() const {
    ModelWeights w;
    w.kind = "unet";
    w.metadata = {{"config", cfg_.to_json()}, {"init", "he_uniform"}, {"seed", cfg_.seed}};
    const auto names = parameter_names();
    for (std::size_t i = 0; i < params_.size(); ++i)
      w.tensors.push_back({names[i], params_[i].shape(),
                           std::vector<float>(params_[i].values().begin(), params_[i].values().end())});
    return w;
  }

  const UNetConfig& config() const noexcept { return cfg_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::vector<Tensor>& parameters() noexcept { return params_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers_) {
      names.push_back(l.name + ".weight");
      names.push_back(l.name + ".bias");
    }
    return names;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += static_cast<std::int64_t>(p.size());
    return n;
  }

  /// Class probabilities (classes, H, W) for one slice (1, H, W) with its
  /// coordinate planes (3, H, W). H and W must be divisible by 2^depth.
  Tensor forward(const Tensor& slice, const Tensor& coords) const {
    check_inputs(slice, coords);
    std::vector<Tensor> skips;
    Tensor x = slice;
    for (int l = 0; l < cfg_.depth; ++l) {
      Tensor a = conv_relu(x, enc(l, 0));
      a = conv_relu(a, enc(l, 1));
      x = nn::maxpool2(a).output;
      skips.push_back(std::move(a));
    }
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      Tensor up = nn::conv2d_transpose(x, weight(dec(l, 0)), bias(dec(l, 0)));
      Tensor b = conv_relu(nn::concat_channels(up, skips[l]), dec(l, 1));
      skips[l] = Tensor();
      if (l == 0 && cfg_.coord_channels) b = nn::concat_channels(b, coords);
      x = conv_relu(b, dec(l, 2));
    }
    if (cfg_.coord_channels) x = nn::concat_channels(x, coords);
    return nn::softmax_channels(nn::conv2d(x, weight(head()), bias(head())));
  }

  Tensor forward(const Tensor& slice, const Tensor& coords, Trace& tr) const {
    check_inputs(slice, coords);
    tr = Trace{};
    Tensor x = slice;
    for (int l = 0; l < cfg_.depth; ++l) {
      tr.enc_in.push_back(x);
      tr.enc_a1.push_back(conv_relu(x, enc(l, 0)));
      tr.enc_a2.push_back(conv_relu(tr.enc_a1.back(), enc(l, 1)));
      auto pooled = nn::maxpool2(tr.enc_a2.back());
      tr.pool_argmax.push_back(std::move(pooled.argmax));
      x = std::move(pooled.output);
    }
    const auto d = static_cast<std::size_t>(cfg_.depth);
    tr.up_in.resize(d);
    tr.cat.resize(d);
    tr.dec_b1.resize(d);
    tr.dec_in2.resize(d);
    tr.dec_b2.resize(d);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      tr.up_in[l] = x;
      Tensor up = nn::conv2d_transpose(x, weight(dec(l, 0)), bias(dec(l, 0)));
      tr.cat[l] = nn::concat_channels(up, tr.enc_a2[l]);
      tr.dec_b1[l] = conv_relu(tr.cat[l], dec(l, 1));
      tr.dec_in2[l] = (l == 0 && cfg_.coord_channels) ? nn::concat_channels(tr.dec_b1[l], coords) : tr.dec_b1[l];
      tr.dec_b2[l] = conv_relu(tr.dec_in2[l], dec(l, 2));
      x = tr.dec_b2[l];
    }
    tr.head_in = cfg_.coord_channels ? nn::concat_channels(x, coords) : x;
    tr.probs = nn::softmax_channels(nn::conv2d(tr.head_in, weight(head()), bias(head())));
    return tr.probs;
  }

  /// Parameter gradients (aligned with parameters()) given dLoss/dProbs.
  std::vector<Tensor> backward(const Trace& tr, const Tensor& d_probs) const {
    std::vector<Tensor> grads(params_.size());
    auto store = [&](int layer, nn::ParamGrads<T>& g) {
      grads[2 * layer] = std::move(g.d_weight);
      grads[2 * layer + 1] = std::move(g.d_bias);
    };
    const auto f0 = static_cast<std::int64_t>(cfg_.filters(0));

    Tensor d_logits = nn::softmax_channels_backward(tr.probs, d_probs);
    auto gh = nn::conv2d_backward(tr.head_in, weight(head()), d_logits);
    store(head(), gh);
    Tensor dx = cfg_.coord_channels ? nn::split_channels(gh.d_input, f0).first : std::move(gh.d_input);

    std::vector<Tensor> d_skip(static_cast<std::size_t>(cfg_.depth));
    for (int l = 0; l < cfg_.depth; ++l) {
      Tensor d_b2 = nn::relu_backward(tr.dec_b2[l], dx);
      auto g2 = nn::conv2d_backward(tr.dec_in2[l], weight(dec(l, 2)), d_b2);
      store(dec(l, 2), g2);
      Tensor d_b1 = (l == 0 && cfg_.coord_channels) ? nn::split_channels(g2.d_input, f0).first : std::move(g2.d_input);
      d_b1 = nn::relu_backward(tr.dec_b1[l], d_b1);
      auto g1 = nn::conv2d_backward(tr.cat[l], weight(dec(l, 1)), d_b1);
      store(dec(l, 1), g1);
      auto [d_up, d_sk] = nn::split_channels(g1.d_input, cfg_.filters(l));
      d_skip[l] = std::move(d_sk);
      auto gu = nn::conv2d_transpose_backward(tr.up_in[l], weight(dec(l, 0)), d_up);
      store(dec(l, 0), gu);
      dx = std::move(gu.d_input);
    }
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      Tensor d_a2 = nn::maxpool2_backward(tr.enc_a2[l].shape(), tr.pool_argmax[l], dx);
      for (std::size_t i = 0; i < d_a2.size(); ++i) d_a2[i] += d_skip[l][i];
      d_a2 = nn::relu_backward(tr.enc_a2[l], std::move(d_a2));
      auto g2 = nn::conv2d_backward(tr.enc_a1[l], weight(enc(l, 1)), d_a2);
      store(enc(l, 1), g2);
      Tensor d_a1 = nn::relu_backward(tr.enc_a1[l], g2.d_input);
      auto g1 = nn::conv2d_backward(tr.enc_in[l], weight(enc(l, 0)), d_a1);
      store(enc(l, 0), g1);
      dx = std::move(g1.d_input);
    }
    return grads;
  }

 private:
  int enc(int level, int conv) const { return 2 * level + conv; }
  int dec(int level, int part) const { return 2 * cfg_.depth + 3 * (cfg_.depth - 1 - level) + part; }
  int head() const { return 5 * cfg_.depth; }
  const Tensor& weight(int layer) const { return params_[2 * layer]; }
  const Tensor& bias(int layer) const { return params_[2 * layer + 1]; }

  Tensor conv_relu(const Tensor& x, int layer) const {
    Tensor y = nn::conv2d(x, weight(layer), bias(layer));
    nn::relu_inplace(y);
    return y;
  }

  void check_inputs(const Tensor& slice, const Tensor& coords) const {
    const std::int64_t m = std::int64_t{1} << cfg_.depth;
    if (slice.rank() != 3 || slice.channels() != cfg_.in_channels || slice.height() % m || slice.width() % m ||
        slice.height() == 0 || slice.width() == 0)
      throw ShapeError("unet forward: slice shape " + nn::shape_string(slice.shape()) + " incompatible with depth " +
                       std::to_string(cfg_.depth));
    if (cfg_.coord_channels &&
        (coords.rank() != 3 || coords.channels() != cfg_.coord_channels || coords.height() != slice.height() ||
         coords.width() != slice.width()))
      throw ShapeError("unet forward: coordinate shape " + nn::shape_string(coords.shape()) + " vs slice " +
                       nn::shape_string(slice.shape()));
  }

  UNetConfig cfg_;
  std::vector<LayerSpec> layers_;
  std::vector<Tensor> params_;
};

}  // namespace multiaxial
