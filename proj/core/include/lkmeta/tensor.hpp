// Copyright 2026 The lkmeta Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef LKMETA_TENSOR_HPP_
#define LKMETA_TENSOR_HPP_

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lkmeta/error.hpp"

namespace lkmeta {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

enum class Dtype { kF32, kF64 };

const char* dtype_name(Dtype dtype);
Dtype parse_dtype(const std::string& name);

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::kF32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::kF64; }

/// Dense row-major array. The last axis (width) varies fastest. Images and
/// feature maps are [C, H, W]; batches prepend N.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), T{0});
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Trailing three axes; a rank-2 tensor is treated as a single plane.
  std::size_t channels() const { return rank() >= 3 ? shape_[rank() - 3] : 1; }
  std::size_t height() const { return shape_[rank() - 2]; }
  std::size_t width() const { return shape_[rank() - 1]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * height() + h) * width() + w];
  }
  const T& operator()(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * height() + h) * width() + w];
  }

  /// Contiguous H x W slice at flat plane index `p` (n * C + c for batches).
  std::span<T> plane(std::size_t p) {
    const std::size_t hw = height() * width();
    return std::span<T>(data_).subspan(p * hw, hw);
  }
  std::span<const T> plane(std::size_t p) const {
    const std::size_t hw = height() * width();
    return std::span<const T>(data_).subspan(p * hw, hw);
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_extents() const {
    if (shape_.size() < 2) {
      throw DimensionError("tensor needs at least 2 axes, got shape " +
                           shape_to_string(shape_));
    }
    for (std::size_t a = 0; a < shape_.size(); ++a) {
      if (shape_[a] == 0) {
        throw DimensionError("tensor axis " + std::to_string(a) +
                             " has zero extent");
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

enum class KernelLayout { kDepthwise, kDense };

const char* layout_name(KernelLayout layout);

/// Convolution weights. Depthwise kernels are [C, Kh, Kw] (one plane per
/// channel, C_in = C_out = C); dense kernels are [C_out, C_in, Kh, Kw].
/// Even extents are representable so they can be rejected with a precise
/// error by the operations that need a center tap.
template <typename T>
class Kernel {
 public:
  using value_type = T;

  Kernel() = default;

  static Kernel depthwise(std::size_t channels, std::size_t kh, std::size_t kw) {
    return Kernel(KernelLayout::kDepthwise, channels, channels, kh, kw,
                  std::vector<T>(channels * kh * kw, T{0}));
  }
  static Kernel depthwise(std::size_t channels, std::size_t kh, std::size_t kw,
                          std::vector<T> weights) {
    return Kernel(KernelLayout::kDepthwise, channels, channels, kh, kw,
                  std::move(weights));
  }
  static Kernel dense(std::size_t out_channels, std::size_t in_channels,
                      std::size_t kh, std::size_t kw, std::vector<T> weights) {
    return Kernel(KernelLayout::kDense, out_channels, in_channels, kh, kw,
                  std::move(weights));
  }

  /// Centered unit impulse in every channel. Extents must be odd.
  static Kernel delta(std::size_t channels, std::size_t size) {
    if (size % 2 == 0) {
      throw UnsupportedKernelError("delta kernel needs an odd size, got " +
                                   std::to_string(size));
    }
    Kernel k = depthwise(channels, size, size);
    const std::size_t r = size / 2;
    for (std::size_t c = 0; c < channels; ++c) k.at(c, r, r) = T{1};
    return k;
  }

  KernelLayout layout() const { return layout_; }
  bool is_depthwise() const { return layout_ == KernelLayout::kDepthwise; }
  std::size_t out_channels() const { return out_channels_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t channels() const { return out_channels_; }
  std::size_t kh() const { return kh_; }
  std::size_t kw() const { return kw_; }
  bool has_odd_extents() const { return kh_ % 2 == 1 && kw_ % 2 == 1; }
  std::size_t plane_size() const { return kh_ * kw_; }
  std::size_t size() const { return weights_.size(); }

  Shape shape() const {
    if (is_depthwise()) return {out_channels_, kh_, kw_};
    return {out_channels_, in_channels_, kh_, kw_};
  }

  std::span<T> weights() { return weights_; }
  std::span<const T> weights() const { return weights_; }
  std::vector<T>& storage() { return weights_; }
  const std::vector<T>& storage() const { return weights_; }

  T& at(std::size_t c, std::size_t u, std::size_t v) {
    return weights_[(c * kh_ + u) * kw_ + v];
  }
  const T& at(std::size_t c, std::size_t u, std::size_t v) const {
    return weights_[(c * kh_ + u) * kw_ + v];
  }
  T& at(std::size_t o, std::size_t i, std::size_t u, std::size_t v) {
    return weights_[((o * in_channels_ + i) * kh_ + u) * kw_ + v];
  }
  const T& at(std::size_t o, std::size_t i, std::size_t u, std::size_t v) const {
    return weights_[((o * in_channels_ + i) * kh_ + u) * kw_ + v];
  }

  /// One spatial plane; `p` is c for depthwise, o * C_in + i for dense.
  std::span<T> plane(std::size_t p) {
    return std::span<T>(weights_).subspan(p * plane_size(), plane_size());
  }
  std::span<const T> plane(std::size_t p) const {
    return std::span<const T>(weights_).subspan(p * plane_size(), plane_size());
  }

  bool operator==(const Kernel& other) const = default;

 private:
  Kernel(KernelLayout layout, std::size_t out_channels, std::size_t in_channels,
         std::size_t kh, std::size_t kw, std::vector<T> weights)
      : layout_(layout),
        out_channels_(out_channels),
        in_channels_(in_channels),
        kh_(kh),
        kw_(kw),
        weights_(std::move(weights)) {
    if (out_channels_ == 0 || in_channels_ == 0) {
      throw DimensionError("kernel channel count must be positive");
    }
    if (kh_ == 0 || kw_ == 0) {
      throw DimensionError("kernel spatial extent must be positive");
    }
    const std::size_t expected =
        (is_depthwise() ? out_channels_ : out_channels_ * in_channels_) * kh_ * kw_;
    if (weights_.size() != expected) {
      throw DimensionError("kernel weight count " +
                           std::to_string(weights_.size()) +
                           " does not match layout " + layout_name(layout_) +
                           " shape " + shape_to_string(shape()));
    }
  }

  KernelLayout layout_ = KernelLayout::kDepthwise;
  std::size_t out_channels_ = 0;
  std::size_t in_channels_ = 0;
  std::size_t kh_ = 0;
  std::size_t kw_ = 0;
  std::vector<T> weights_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  return Tensor<To>(t.shape(), std::vector<To>(t.data().begin(), t.data().end()));
}

template <typename To, typename From>
Kernel<To> kernel_cast(const Kernel<From>& k) {
  std::vector<To> w(k.weights().begin(), k.weights().end());
  if (k.is_depthwise()) return Kernel<To>::depthwise(k.channels(), k.kh(), k.kw(), std::move(w));
  return Kernel<To>::dense(k.out_channels(), k.in_channels(), k.kh(), k.kw(), std::move(w));
}

}  // namespace lkmeta

#endif  // LKMETA_TENSOR_HPP_
