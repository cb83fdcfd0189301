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

#ifndef LKMETA_BLOCK_HPP_
#define LKMETA_BLOCK_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lkmeta/tensor.hpp"

namespace lkmeta {

// Intermediate representation of a large-kernel re-parameterized block:
// parallel branches, each an ordered stack of depthwise layers with a
// per-channel scale after every layer. The block is linear; there is no
// non-linear element anywhere inside it.

template <typename T>
struct ScaleFactors {
  std::vector<T> gamma;
};

template <typename T>
struct BasicDepthwiseLayer {
  Kernel<T> kernel;  // depthwise [C, K, K], K odd
  ScaleFactors<T> scale;
};

template <typename T>
struct BasicBranch {
  std::vector<BasicDepthwiseLayer<T>> layers;
  std::size_t declaration_index = 0;
};

template <typename T>
struct BasicBlockSpec {
  std::size_t channels = 0;
  std::vector<BasicBranch<T>> branches;
};

using ScaleFactorsF64 = ScaleFactors<double>;
using DepthwiseLayerSpec = BasicDepthwiseLayer<double>;
using BranchSpec = BasicBranch<double>;
using BlockSpec = BasicBlockSpec<double>;

inline constexpr std::size_t kMaxBranches = 4;

enum class HeadOp { kBatchNorm, kRelu, kFlatten, kDense, kSoftmax, kDepthwiseBlock };

const char* head_op_name(HeadOp op);

struct HeadStage {
  HeadOp op = HeadOp::kRelu;
  std::size_t units = 0;            // kDense only
  std::optional<BlockSpec> block;   // kDepthwiseBlock only (digital, C -> C)
};

struct ModelSpec {
  BlockSpec front;
  std::vector<HeadStage> head;
  std::size_t class_count = 10;
  std::size_t input_channels = 1;
  std::size_t input_height = 28;
  std::size_t input_width = 28;
  // Number of computational stages placed before the front block. Anything
  // but zero makes the front unfabricable.
  std::size_t front_index = 0;
};

struct ParseOptions {
  std::filesystem::path base_dir = ".";  // resolves weights_ref paths
  std::uint64_t seed = 0;                // used when the document has no "seed"
};

/// Odd spatial size of the single kernel equivalent to the branch:
/// sum_i (k_i - 1) + 1.
template <typename T>
std::size_t effective_kernel_size(const BasicBranch<T>& branch);

template <typename T>
std::size_t max_effective_kernel_size(const BasicBlockSpec<T>& block);

template <typename T>
void validate_block(const BasicBlockSpec<T>& block);

void validate_model(const ModelSpec& model);

BlockSpec parse_block(std::string_view config_text, const ParseOptions& options = {});
ModelSpec parse_model(std::string_view config_text, const ParseOptions& options = {});
BlockSpec load_block(const std::filesystem::path& path, std::uint64_t seed = 0);
ModelSpec load_model(const std::filesystem::path& path, std::uint64_t seed = 0);

/// JSON document with all weights inline; parse_block() reads it back
/// bit-exactly.
std::string block_to_json(const BlockSpec& block);

/// Builds a block from per-branch kernel-size stacks, e.g. {{3,3,3},{3,3},{3}}
/// for the "3 dwc + 2 dwc + 1 dwc" layout, with seeded uniform weights of
/// half-width sqrt(1 / K^2) and unit scales.
BlockSpec make_block(std::size_t channels,
                     const std::vector<std::vector<std::size_t>>& stacks,
                     std::uint64_t seed);

BlockSpec block_from_kernel(const Kernel<double>& kernel);

/// Default head: batch-norm, ReLU, flatten, dense(classes), softmax.
std::vector<HeadStage> default_head(std::size_t classes);
ModelSpec make_model(BlockSpec front, std::size_t height, std::size_t width,
                     std::size_t classes);

/// 16 hex digits; stable across runs and platforms.
std::string block_hash(const BlockSpec& block);

template <typename U, typename T>
BasicBlockSpec<U> block_cast(const BasicBlockSpec<T>& block) {
  BasicBlockSpec<U> out;
  out.channels = block.channels;
  for (const auto& br : block.branches) {
    BasicBranch<U> b;
    b.declaration_index = br.declaration_index;
    for (const auto& l : br.layers) {
      b.layers.push_back({kernel_cast<U>(l.kernel),
                          {std::vector<U>(l.scale.gamma.begin(), l.scale.gamma.end())}});
    }
    out.branches.push_back(std::move(b));
  }
  return out;
}

/// Same-padded forward pass: sum over branches (declaration order) of the
/// branch's layer stack, each layer followed by its per-channel scale.
/// Accepts [1|C, H, W] or [N, 1|C, H, W]; single-channel input is broadcast.
template <typename T>
Tensor<T> forward_block(const BasicBlockSpec<T>& block, const Tensor<T>& x);

/// Valid-mode forward pass; every branch output is center-cropped to the
/// size produced by the largest effective kernel before summation.
template <typename T>
Tensor<T> forward_block_valid(const BasicBlockSpec<T>& block, const Tensor<T>& x);

/// Branch indices sorted by declaration index.
template <typename T>
std::vector<std::size_t> summation_order(const BasicBlockSpec<T>& block);

}  // namespace lkmeta

#endif  // LKMETA_BLOCK_HPP_
