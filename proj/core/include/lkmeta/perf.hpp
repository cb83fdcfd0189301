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

#ifndef LKMETA_PERF_HPP_
#define LKMETA_PERF_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lkmeta/block.hpp"
#include "lkmeta/optic.hpp"
#include "lkmeta/tensor.hpp"
#include "lkmeta/trainer.hpp"

namespace lkmeta {

// A multiply-accumulate counts as 2 FLOPs throughout.

/// 2 H W Ci Co Kh Kw. Throws ValidationError on a zero argument.
std::uint64_t flops_conv(std::uint64_t h, std::uint64_t w, std::uint64_t ci, std::uint64_t co,
                         std::uint64_t kh, std::uint64_t kw);

/// 2 H W C Kh Kw.
std::uint64_t flops_depthwise(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t kh,
                              std::uint64_t kw);

// Per-element costs of the digital head stages.
inline constexpr std::uint64_t kBatchNormFlopsPerElement = 2;  // scale and shift
inline constexpr std::uint64_t kReluFlopsPerElement = 1;
inline constexpr std::uint64_t kSoftmaxFlopsPerClass = 3;      // exp, sum, divide

struct StageFlops {
  std::string name;
  std::uint64_t flops = 0;
  bool optical = false;  // counted as offloaded to the fabricated front
};

struct FlopsBreakdown {
  std::vector<StageFlops> stages;  // inference graph, compressed front first
  std::uint64_t front_block = 0;   // multi-branch front as trained
  std::uint64_t compressed_front = 0;
  std::uint64_t head = 0;
  std::uint64_t total = 0;         // compressed_front + head
  std::uint64_t digital = 0;       // total minus offloaded stages
  double offload_ratio = 0.0;      // offloaded / total
  bool fabricable = false;
  Diagnostics diagnostics;

  std::string to_json() const;
};

/// Totals and ratio from an explicit stage list.
FlopsBreakdown breakdown_from_stages(std::vector<StageFlops> stages);

/// FLOPs of the multi-branch front: every layer's depthwise correlation,
/// its per-channel scale, and the branch additions.
std::uint64_t front_block_flops(const BlockSpec& front, std::size_t h, std::size_t w);

/// Fabricability is judged on the split form of the compressed front.
FlopsBreakdown analyze_model(const ModelSpec& model, const FabricationLimits& limits = {});

struct SweepCell {
  std::size_t layers = 0;
  std::size_t channels = 0;
  FlopsBreakdown flops;
  std::optional<double> accuracy;
};

struct SweepResult {
  std::vector<std::size_t> layer_values;
  std::vector<std::size_t> channel_values;
  std::vector<SweepCell> cells;  // layer-major
  std::optional<std::size_t> best;  // index into cells

  const SweepCell& at(std::size_t layers, std::size_t channels) const;
  /// layers,channels,flops_front,flops_rest,offload_ratio,fabricable,accuracy
  std::string to_csv() const;
  /// "x y size fabricable" rows: digital FLOPs, layer count, offload ratio.
  std::string to_plot_data() const;
  std::string to_json() const;
};

struct SweepOptions {
  std::size_t min_layers = 1, max_layers = 5;
  std::size_t min_channels = 9, max_channels = 30;
  std::size_t height = 28, width = 28, classes = 10;
  // Kernel-size stacks of the fabricated front and of every digital block.
  std::vector<std::vector<std::size_t>> stacks{{3, 3, 3}, {3, 3}, {3}};
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // Optional desk-scale accuracy for a cell; returning nullopt leaves it empty.
  std::function<std::optional<double>(const ModelSpec&, std::size_t layers, std::size_t channels)>
      accuracy;
};

/// Layer 1 is the fabricated front; layers 2..L are digital depthwise blocks
/// of the same shape, each followed by batch-norm and ReLU.
ModelSpec sweep_model(std::size_t layers, std::size_t channels, const SweepOptions& options);

/// `best` is the fabricable cell with the largest offload ratio, ties broken
/// by fewer digital FLOPs, then fewer layers, then fewer channels.
SweepResult sweep_structures(const SweepOptions& options, const FabricationLimits& limits = {});

enum class InferenceMode { kDigital, kHybrid };

const char* inference_mode_name(InferenceMode mode);

struct TimingStats {
  InferenceMode mode = InferenceMode::kDigital;
  std::size_t repetitions = 0;
  std::size_t warmup = 0;
  double median_s = 0.0;
  double q1_s = 0.0;
  double q3_s = 0.0;
  double iqr_s = 0.0;
  std::vector<double> samples_s;

  std::string to_json() const;
};

/// Linear-interpolated quantile of unsorted samples, q in [0, 1].
double quantile(std::vector<double> samples, double q);

struct TimingOptions {
  std::size_t repetitions = 30;
  std::size_t warmup = 5;
};

/// Digital mode times the full inference pass with the front given as one
/// compressed kernel. Hybrid mode precomputes the front outputs (the optical
/// stage, treated as free) and times only the digital remainder.
TimingStats time_inference(const NaiveModel<float>& model, const Tensor<float>& batch,
                           InferenceMode mode, const TimingOptions& options = {});

}  // namespace lkmeta

#endif  // LKMETA_PERF_HPP_
