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

#ifndef LKMETA_OPTIC_HPP_
#define LKMETA_OPTIC_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lkmeta/block.hpp"
#include "lkmeta/reparam.hpp"
#include "lkmeta/tensor.hpp"

namespace lkmeta {

// Hardware-adaptation passes for a fabricated optical front end: the lens
// array can only realise non-negative transmission, a limited number of
// channels and kernel size, finite precision, and it suffers fabrication
// noise.

/// K = positive - negative with both parts non-negative and disjoint support.
struct SplitKernel {
  Kernel<double> positive;
  Kernel<double> negative;
};

SplitKernel split_kernel(const Kernel<double>& k);

/// Recombines a split as a two-branch block (gamma +1 and -1) so that the
/// forward pass subtracts the two feature maps.
BlockSpec split_as_block(const SplitKernel& split);

struct SinSquareParam {
  Kernel<double> theta;  // same layout as the induced kernel
};

/// w = sin^2(theta), always in [0, 1].
Kernel<double> sin2_weights(const SinSquareParam& p);
/// dw/dtheta = sin(2 theta), elementwise.
Kernel<double> sin2_weights_grad(const SinSquareParam& p);

/// Elementwise max(w, 0).
template <typename T>
Kernel<T> project_nonneg(const Kernel<T>& k);

struct NonnegPenalty {
  double hinge = 0.0;             // sum max(0, -w), the optimised surrogate
  std::size_t negative_count = 0; // sum 1[w < 0], reported for diagnostics
};

NonnegPenalty nonneg_penalty(const Kernel<double>& k);
/// d hinge / dw: -1 where w < 0, else 0.
Kernel<double> nonneg_penalty_grad(const Kernel<double>& k);

struct QuantSpec {
  int bits = 8;
  double scale = 0.0;       // max|w| / (2^(bits-1) - 1), filled by quantize_kernel
  bool degenerate = false;  // all-zero kernel; weights left unchanged
};

/// Symmetric uniform per-kernel quantization with round-half-away-from-zero,
/// returning dequantized weights and the QuantSpec with its scale filled in.
std::pair<Kernel<double>, QuantSpec> quantize_kernel(const Kernel<double>& k, QuantSpec q);

/// Re-quantizes on a fixed grid (q.scale must be set).
Kernel<double> quantize_with_scale(const Kernel<double>& k, const QuantSpec& q);

struct NoiseSpec {
  double amplitude = 0.0;  // std as a fraction of the kernel's max |w|
  std::uint64_t seed = 0;
};

struct NoiseRecord {
  double amplitude = 0.0;
  double sigma = 0.0;  // absolute std actually applied
  std::uint64_t seed = 0;
  std::string scaling = "relative-to-max-abs";
};

/// w' = w + N(0, (amplitude * max|w|)^2), seeded. amplitude 0 is bit-identical.
Kernel<double> inject_noise(const Kernel<double>& k, const NoiseSpec& n,
                            NoiseRecord* record = nullptr);

struct FabricationLimits {
  std::size_t max_kernel_size = 7;
  std::size_t max_channels = 12;
  std::size_t max_layers_fabricable = 1;
  std::size_t input_channels = 1;
  bool require_nonnegative = true;

  static FabricationLimits from_json(const std::string& text);
  std::string to_json() const;
};

enum class ViolationKind {
  kKernelSize,
  kChannels,
  kNegativeWeights,
  kNotFirstLayer,
  kMultiChannelInput,
  kTooManyLayers,
};

const char* violation_name(ViolationKind kind);

struct Violation {
  ViolationKind kind;
  std::string message;
};

using Diagnostics = std::vector<Violation>;

/// Empty result means fabricable.
Diagnostics check_fabrication(const ModelSpec& model, const CompressedKernel& ck,
                              const FabricationLimits& limits);
Diagnostics check_fabrication(const ModelSpec& model, const SplitKernel& split,
                              const FabricationLimits& limits);

bool has_violation(const Diagnostics& d, ViolationKind kind);

struct AdaptOptions {
  bool split = true;
  std::optional<int> bits;  // quantize when set
  NoiseSpec noise;          // amplitude 0 disables
};

/// Output of the full pass pipeline: quantize -> split -> noise per part
/// (clamped at zero, since a lens cannot transmit negative intensity). Without
/// split, `positive` holds the signed kernel and `negative` is all zeros.
struct AdaptedKernel {
  Kernel<double> positive;
  Kernel<double> negative;
  bool split = false;
  std::optional<QuantSpec> quant;
  std::optional<NoiseRecord> noise;
  Diagnostics diagnostics;

  /// positive - negative: the kernel the optical pair realises.
  Kernel<double> effective() const;
  SplitKernel as_split() const { return {positive, negative}; }
};

AdaptedKernel adapt_kernel(const ModelSpec& model, const CompressedKernel& ck,
                           const AdaptOptions& options, const FabricationLimits& limits);

}  // namespace lkmeta

#endif  // LKMETA_OPTIC_HPP_
