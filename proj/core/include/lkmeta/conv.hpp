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

#ifndef LKMETA_CONV_HPP_
#define LKMETA_CONV_HPP_

#include <cstddef>
#include <span>

#include "lkmeta/tensor.hpp"

namespace lkmeta {

// All forward evaluations are cross-correlations:
//   y[c][i][j] = sum_{u,v} k[c][u][v] * x[c][i + u][j + v]          (valid)
// with x zero-extended by (K - 1) / 2 on each side in same mode. Kernel
// composition (conv2d_full) is true convolution, so that
//   corr2d_valid(corr2d_valid(x, k1), k2) == corr2d_valid(x, conv2d_full(k1, k2)).
//
// Inputs are [C, H, W], [N, C, H, W], or a bare [H, W] plane. A depthwise
// kernel applied to a single-channel input broadcasts that plane to every
// kernel channel.

template <typename T>
Tensor<T> corr2d_valid(const Tensor<T>& x, const Kernel<T>& k);

template <typename T>
Tensor<T> corr2d_same(const Tensor<T>& x, const Kernel<T>& k);

/// Per-channel full 2-D convolution of two depthwise kernels; extents add
/// minus one, so odd inputs give odd outputs.
template <typename T>
Kernel<T> conv2d_full(const Kernel<T>& k1, const Kernel<T>& k2);

template <typename T>
Kernel<T> flip180(const Kernel<T>& k);

/// Embeds `k` in the center of a zero kernel of the target extents.
template <typename T>
Kernel<T> pad_center(const Kernel<T>& k, std::size_t target_h, std::size_t target_w);

template <typename T>
Kernel<T> pad_center(const Kernel<T>& k, std::size_t target) {
  return pad_center(k, target, target);
}

// Single-plane primitives shared by the tensor-level operations and the
// trainer's hot loops. Every routine accumulates into its output; the tap
// order is (u, v) row-major for every output pixel.
namespace plane {

/// out[H-kh+1, W-kw+1] += valid correlation of x[H, W] with k[kh, kw].
template <typename T>
void correlate_valid(std::span<const T> x, std::size_t h, std::size_t w,
                     std::span<const T> k, std::size_t kh, std::size_t kw,
                     std::span<T> out);

/// out[H, W] += zero-padded correlation of x[H, W] with odd k[kh, kw].
template <typename T>
void correlate_same(std::span<const T> x, std::size_t h, std::size_t w,
                    std::span<const T> k, std::size_t kh, std::size_t kw,
                    std::span<T> out);

/// dk[kh, kw] += d(sum(dy * correlate_same(x, k))) / dk.
template <typename T>
void correlate_same_kernel_grad(std::span<const T> x, std::span<const T> dy,
                                std::size_t h, std::size_t w, std::span<T> dk,
                                std::size_t kh, std::size_t kw);

/// dx[H, W] += d(sum(dy * correlate_same(x, k))) / dx.
template <typename T>
void correlate_same_input_grad(std::span<const T> dy, std::size_t h, std::size_t w,
                               std::span<const T> k, std::size_t kh, std::size_t kw,
                               std::span<T> dx);

}  // namespace plane

}  // namespace lkmeta

#endif  // LKMETA_CONV_HPP_
