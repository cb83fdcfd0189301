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

#include "lkmeta/conv.hpp"

#include <algorithm>
#include <string>

namespace lkmeta {

namespace {

struct Geometry {
  std::size_t batch;
  std::size_t channels;
  std::size_t h;
  std::size_t w;
};

template <typename T>
Geometry geometry(const Tensor<T>& x) {
  switch (x.rank()) {
    case 2: return {1, 1, x.dim(0), x.dim(1)};
    case 3: return {1, x.dim(0), x.dim(1), x.dim(2)};
    case 4: return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
    default:
      throw DimensionError("correlation input must have rank 2, 3 or 4, got " +
                           shape_to_string(x.shape()));
  }
}

Shape output_shape(const Geometry& g, std::size_t rank, std::size_t out_c,
                   std::size_t oh, std::size_t ow) {
  if (rank == 4) return {g.batch, out_c, oh, ow};
  return {out_c, oh, ow};
}

// Number of input planes per output channel and the input plane index
// feeding (output channel o, input slot i).
template <typename T>
void check_channels(const Geometry& g, const Kernel<T>& k) {
  if (k.is_depthwise()) {
    if (g.channels != k.channels() && g.channels != 1) {
      throw DimensionError("channel axis: input has " + std::to_string(g.channels) +
                           " channels, depthwise kernel has " +
                           std::to_string(k.channels()));
    }
  } else if (g.channels != k.in_channels()) {
    throw DimensionError("channel axis: input has " + std::to_string(g.channels) +
                         " channels, dense kernel expects " +
                         std::to_string(k.in_channels()));
  }
}

template <typename T, typename PlaneOp>
Tensor<T> correlate(const Tensor<T>& x, const Kernel<T>& k, std::size_t oh,
                    std::size_t ow, PlaneOp op) {
  const Geometry g = geometry(x);
  check_channels(g, k);
  const std::size_t out_c = k.out_channels();
  Tensor<T> y(output_shape(g, x.rank(), out_c, oh, ow));
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < out_c; ++o) {
      auto out = y.plane(n * out_c + o);
      if (k.is_depthwise()) {
        const std::size_t ic = g.channels == 1 ? 0 : o;
        op(x.plane(n * g.channels + ic), k.plane(o), out);
      } else {
        for (std::size_t i = 0; i < k.in_channels(); ++i) {
          op(x.plane(n * g.channels + i), k.plane(o * k.in_channels() + i), out);
        }
      }
    }
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> corr2d_valid(const Tensor<T>& x, const Kernel<T>& k) {
  const Geometry g = geometry(x);
  if (g.h < k.kh()) {
    throw DimensionError("height axis: input height " + std::to_string(g.h) +
                         " is smaller than kernel height " + std::to_string(k.kh()));
  }
  if (g.w < k.kw()) {
    throw DimensionError("width axis: input width " + std::to_string(g.w) +
                         " is smaller than kernel width " + std::to_string(k.kw()));
  }
  return correlate(x, k, g.h - k.kh() + 1, g.w - k.kw() + 1,
                   [&](std::span<const T> in, std::span<const T> kp, std::span<T> out) {
                     plane::correlate_valid(in, g.h, g.w, kp, k.kh(), k.kw(), out);
                   });
}

template <typename T>
Tensor<T> corr2d_same(const Tensor<T>& x, const Kernel<T>& k) {
  if (!k.has_odd_extents()) {
    throw UnsupportedKernelError("same-padded correlation needs odd kernel extents, got " +
                                 std::to_string(k.kh()) + "x" + std::to_string(k.kw()));
  }
  const Geometry g = geometry(x);
  return correlate(x, k, g.h, g.w,
                   [&](std::span<const T> in, std::span<const T> kp, std::span<T> out) {
                     plane::correlate_same(in, g.h, g.w, kp, k.kh(), k.kw(), out);
                   });
}

template <typename T>
Kernel<T> conv2d_full(const Kernel<T>& k1, const Kernel<T>& k2) {
  if (!k1.is_depthwise() || !k2.is_depthwise()) {
    throw DimensionError("layout: kernel composition needs depthwise kernels");
  }
  if (k1.channels() != k2.channels()) {
    throw DimensionError("channel axis: composing kernels with " +
                         std::to_string(k1.channels()) + " and " +
                         std::to_string(k2.channels()) + " channels");
  }
  if (!k1.has_odd_extents() || !k2.has_odd_extents()) {
    throw UnsupportedKernelError("kernel composition needs odd kernel extents");
  }
  const std::size_t oh = k1.kh() + k2.kh() - 1;
  const std::size_t ow = k1.kw() + k2.kw() - 1;
  Kernel<T> out = Kernel<T>::depthwise(k1.channels(), oh, ow);
  for (std::size_t c = 0; c < k1.channels(); ++c) {
    for (std::size_t u = 0; u < k1.kh(); ++u) {
      for (std::size_t v = 0; v < k1.kw(); ++v) {
        const T a = k1.at(c, u, v);
        for (std::size_t p = 0; p < k2.kh(); ++p) {
          for (std::size_t q = 0; q < k2.kw(); ++q) {
            out.at(c, u + p, v + q) += a * k2.at(c, p, q);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Kernel<T> flip180(const Kernel<T>& k) {
  Kernel<T> out = k;
  const std::size_t planes = k.size() / k.plane_size();
  for (std::size_t p = 0; p < planes; ++p) {
    auto src = k.plane(p);
    auto dst = out.plane(p);
    std::reverse_copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

template <typename T>
Kernel<T> pad_center(const Kernel<T>& k, std::size_t target_h, std::size_t target_w) {
  if (target_h % 2 == 0 || target_w % 2 == 0) {
    throw UnsupportedKernelError("pad target must be odd, got " +
                                 std::to_string(target_h) + "x" + std::to_string(target_w));
  }
  if (!k.has_odd_extents()) {
    throw UnsupportedKernelError("central padding needs odd kernel extents");
  }
  if (target_h < k.kh() || target_w < k.kw()) {
    throw UnsupportedKernelError("pad target " + std::to_string(target_h) + "x" +
                                 std::to_string(target_w) + " is smaller than kernel " +
                                 std::to_string(k.kh()) + "x" + std::to_string(k.kw()));
  }
  if (target_h == k.kh() && target_w == k.kw()) return k;
  const std::size_t oy = (target_h - k.kh()) / 2;
  const std::size_t ox = (target_w - k.kw()) / 2;
  const std::size_t planes = k.size() / k.plane_size();
  std::vector<T> w(planes * target_h * target_w, T{0});
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t u = 0; u < k.kh(); ++u) {
      for (std::size_t v = 0; v < k.kw(); ++v) {
        w[(p * target_h + u + oy) * target_w + v + ox] = k.plane(p)[u * k.kw() + v];
      }
    }
  }
  if (k.is_depthwise()) return Kernel<T>::depthwise(k.channels(), target_h, target_w, std::move(w));
  return Kernel<T>::dense(k.out_channels(), k.in_channels(), target_h, target_w, std::move(w));
}

namespace plane {

template <typename T>
void correlate_valid(std::span<const T> x, std::size_t h, std::size_t w,
                     std::span<const T> k, std::size_t kh, std::size_t kw,
                     std::span<T> out) {
  const std::size_t oh = h - kh + 1;
  const std::size_t ow = w - kw + 1;
  for (std::size_t u = 0; u < kh; ++u) {
    for (std::size_t v = 0; v < kw; ++v) {
      const T wt = k[u * kw + v];
      for (std::size_t i = 0; i < oh; ++i) {
        const T* src = x.data() + (i + u) * w + v;
        T* dst = out.data() + i * ow;
        for (std::size_t j = 0; j < ow; ++j) dst[j] += wt * src[j];
      }
    }
  }
}

namespace {

// Output index range [lo, hi) for which input index i + d stays in [0, n).
inline void in_bounds(std::ptrdiff_t d, std::size_t n, std::size_t& lo, std::size_t& hi) {
  const auto sn = static_cast<std::ptrdiff_t>(n);
  lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -d));
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(sn - d, 0, sn));
  if (hi < lo) hi = lo;
}

// Flat index of (i + di, j + dj); only called with in-bounds targets.
inline std::size_t shifted(std::size_t i, std::size_t j, std::size_t w, std::ptrdiff_t di,
                           std::ptrdiff_t dj) {
  return static_cast<std::size_t>((static_cast<std::ptrdiff_t>(i) + di) *
                                      static_cast<std::ptrdiff_t>(w) +
                                  static_cast<std::ptrdiff_t>(j) + dj);
}

}  // namespace

template <typename T>
void correlate_same(std::span<const T> x, std::size_t h, std::size_t w,
                    std::span<const T> k, std::size_t kh, std::size_t kw,
                    std::span<T> out) {
  const auto rh = static_cast<std::ptrdiff_t>(kh / 2);
  const auto rw = static_cast<std::ptrdiff_t>(kw / 2);
  for (std::size_t u = 0; u < kh; ++u) {
    const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(u) - rh;
    std::size_t i0, i1;
    in_bounds(di, h, i0, i1);
    for (std::size_t v = 0; v < kw; ++v) {
      const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(v) - rw;
      std::size_t j0, j1;
      in_bounds(dj, w, j0, j1);
      const T wt = k[u * kw + v];
      for (std::size_t i = i0; i < i1; ++i) {
        const T* src = x.data() + shifted(i, j0, w, di, dj);
        T* dst = out.data() + i * w + j0;
        for (std::size_t j = 0; j < j1 - j0; ++j) dst[j] += wt * src[j];
      }
    }
  }
}

template <typename T>
void correlate_same_kernel_grad(std::span<const T> x, std::span<const T> dy,
                                std::size_t h, std::size_t w, std::span<T> dk,
                                std::size_t kh, std::size_t kw) {
  const auto rh = static_cast<std::ptrdiff_t>(kh / 2);
  const auto rw = static_cast<std::ptrdiff_t>(kw / 2);
  for (std::size_t u = 0; u < kh; ++u) {
    const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(u) - rh;
    std::size_t i0, i1;
    in_bounds(di, h, i0, i1);
    for (std::size_t v = 0; v < kw; ++v) {
      const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(v) - rw;
      std::size_t j0, j1;
      in_bounds(dj, w, j0, j1);
      T acc{0};
      for (std::size_t i = i0; i < i1; ++i) {
        const T* src = x.data() + shifted(i, j0, w, di, dj);
        const T* g = dy.data() + i * w + j0;
        for (std::size_t j = 0; j < j1 - j0; ++j) acc += g[j] * src[j];
      }
      dk[u * kw + v] += acc;
    }
  }
}

template <typename T>
void correlate_same_input_grad(std::span<const T> dy, std::size_t h, std::size_t w,
                               std::span<const T> k, std::size_t kh, std::size_t kw,
                               std::span<T> dx) {
  const auto rh = static_cast<std::ptrdiff_t>(kh / 2);
  const auto rw = static_cast<std::ptrdiff_t>(kw / 2);
  for (std::size_t u = 0; u < kh; ++u) {
    const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(u) - rh;
    std::size_t i0, i1;
    in_bounds(di, h, i0, i1);
    for (std::size_t v = 0; v < kw; ++v) {
      const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(v) - rw;
      std::size_t j0, j1;
      in_bounds(dj, w, j0, j1);
      const T wt = k[u * kw + v];
      for (std::size_t i = i0; i < i1; ++i) {
        T* dst = dx.data() + shifted(i, j0, w, di, dj);
        const T* g = dy.data() + i * w + j0;
        for (std::size_t j = 0; j < j1 - j0; ++j) dst[j] += wt * g[j];
      }
    }
  }
}

}  // namespace plane

#define LKMETA_INSTANTIATE_CONV(T)                                                     \
  template Tensor<T> corr2d_valid(const Tensor<T>&, const Kernel<T>&);                 \
  template Tensor<T> corr2d_same(const Tensor<T>&, const Kernel<T>&);                  \
  template Kernel<T> conv2d_full(const Kernel<T>&, const Kernel<T>&);                  \
  template Kernel<T> flip180(const Kernel<T>&);                                        \
  template Kernel<T> pad_center(const Kernel<T>&, std::size_t, std::size_t);           \
  template void plane::correlate_valid(std::span<const T>, std::size_t, std::size_t,   \
                                       std::span<const T>, std::size_t, std::size_t,   \
                                       std::span<T>);                                  \
  template void plane::correlate_same(std::span<const T>, std::size_t, std::size_t,    \
                                      std::span<const T>, std::size_t, std::size_t,    \
                                      std::span<T>);                                   \
  template void plane::correlate_same_kernel_grad(std::span<const T>, std::span<const T>, \
                                                  std::size_t, std::size_t, std::span<T>, \
                                                  std::size_t, std::size_t);           \
  template void plane::correlate_same_input_grad(std::span<const T>, std::size_t,      \
                                                 std::size_t, std::span<const T>,      \
                                                 std::size_t, std::size_t, std::span<T>);

LKMETA_INSTANTIATE_CONV(float)
LKMETA_INSTANTIATE_CONV(double)

#undef LKMETA_INSTANTIATE_CONV

}  // namespace lkmeta
