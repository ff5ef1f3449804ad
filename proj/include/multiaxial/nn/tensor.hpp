#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "multiaxial/error.hpp"

namespace multiaxial::nn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t element_count(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

/// Dense row-major tensor. 2D feature maps are (channels, height, width);
/// the 3D merge stage uses (channels, depth, height, width).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(element_count(shape_)), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != element_count(shape_))
      throw ShapeError("tensor payload has " + std::to_string(data_.size()) + " elements, shape " +
                       shape_string(shape_) + " needs " + std::to_string(element_count(shape_)));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::int64_t channels() const { return shape_.at(0); }
  std::int64_t height() const { return shape_.at(shape_.size() - 2); }
  std::int64_t width() const { return shape_.back(); }
  /// Elements per channel.
  std::int64_t plane() const { return shape_.empty() ? 0 : element_count(shape_) / shape_[0]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::int64_t c, std::int64_t y, std::int64_t x) {
    return data_[static_cast<std::size_t>((c * height() + y) * width() + x)];
  }
  const T& at(std::int64_t c, std::int64_t y, std::int64_t x) const {
    return data_[static_cast<std::size_t>((c * height() + y) * width() + x)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <class T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

/// Sum of row r, accumulated left to right. Eigen's vectorized reductions
/// split the sum at the first aligned address, which varies between heap
/// allocations, so they are avoided where results must be reproducible.
template <class M>
typename M::Scalar row_sum(const M& m, Eigen::Index r) {
  typename M::Scalar s{0};
  for (Eigen::Index c = 0; c < m.cols(); ++c) s += m(r, c);
  return s;
}

/// View of a (C, ...) tensor as a C x plane matrix.
template <class T>
MapRM<T> as_matrix(Tensor<T>& t) {
  return MapRM<T>(t.data(), t.channels(), t.plane());
}
template <class T>
ConstMapRM<T> as_matrix(const Tensor<T>& t) {
  return ConstMapRM<T>(t.data(), t.channels(), t.plane());
}

inline void require_shape(bool ok, const std::string& op, const Shape& a, const Shape& b) {
  if (!ok) throw ShapeError(op + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

/// Concatenates feature maps along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.rank() == b.rank() && a.height() == b.height() && a.width() == b.width(), "concat",
                a.shape(), b.shape());
  Shape s = a.shape();
  s[0] += b.channels();
  std::vector<T> v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Tensor<T>(std::move(s), std::move(v));
}

/// Splits off the first `channels` channels; inverse of concat_channels.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& t, std::int64_t channels) {
  const auto plane = static_cast<std::size_t>(t.plane());
  Shape sa = t.shape(), sb = t.shape();
  sa[0] = channels;
  sb[0] = t.channels() - channels;
  const auto cut = t.values().begin() + static_cast<std::ptrdiff_t>(plane * channels);
  return {Tensor<T>(sa, std::vector<T>(t.values().begin(), cut)),
          Tensor<T>(sb, std::vector<T>(cut, t.values().end()))};
}

/// Portable uniform draw in [0,1) from a 64-bit engine (bit-reproducible
/// across standard library implementations).
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Box-Muller standard normal.
inline double normal01(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Uniform index in [0, n) by rejection sampling.
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do x = rng();
  while (x >= limit);
  return x % n;
}

template <class It>
void shuffle(It first, It last, std::mt19937_64& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) std::iter_swap(first + (i - 1), first + uniform_index(rng, i));
}

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

}  // namespace multiaxial::nn
