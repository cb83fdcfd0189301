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

#ifndef LKMETA_REPARAM_HPP_
#define LKMETA_REPARAM_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lkmeta/block.hpp"
#include "lkmeta/error.hpp"
#include "lkmeta/tensor.hpp"

namespace lkmeta {

inline constexpr const char* kFoldScalesPass = "fold_scales/1";
inline constexpr const char* kCollapseStackPass = "collapse_stack/1";
inline constexpr const char* kMergeBranchesPass = "merge_branches/1";

struct Provenance {
  std::string block_hash;           // empty when not produced from a block
  std::vector<std::string> passes;  // in application order
};

template <typename T>
struct BasicCompressedKernel {
  Kernel<T> kernel;  // depthwise, square, odd
  Provenance provenance;
};

using CompressedKernel = BasicCompressedKernel<double>;

/// gamma[c] * kernel[c] for every channel.
template <typename T>
Kernel<T> fold_scales(const BasicDepthwiseLayer<T>& layer);

/// Left fold of conv2d_full over the branch's scale-folded layers. Equal to
/// the nested right fold by associativity.
template <typename T>
Kernel<T> collapse_stack(const BasicBranch<T>& branch);

/// Pads every kernel to the largest size and sums them in list order.
template <typename T>
BasicCompressedKernel<T> merge_branches(std::span<const Kernel<T>> kernels);

/// fold -> collapse -> merge, branches taken in declaration order.
template <typename T>
BasicCompressedKernel<T> compress_block(const BasicBlockSpec<T>& block);

struct ModeError {
  double max_abs_err = 0.0;
  // Largest |block - kernel| over a trial divided by that trial's largest
  // |block| output, maximised over trials.
  double max_rel_err = 0.0;
};

struct EquivalenceReport {
  ModeError valid;
  ModeError same_interior;
  std::size_t trials = 0;
  std::size_t margin = 0;  // pixels excluded per side in same-interior mode
  double tolerance = 0.0;
  bool passed = false;
  std::string dtype = "f64";

  std::string to_text() const;
  std::string to_json() const;
};

class VerificationFailure : public Error {
 public:
  explicit VerificationFailure(EquivalenceReport report);
  const EquivalenceReport& report() const { return report_; }

 private:
  EquivalenceReport report_;
};

struct VerifyOptions {
  std::size_t trials = 16;
  double tolerance = 1e-9;  // applied to max_rel_err in both modes
  std::uint64_t seed = 0;
  // Inputs are height x width; zero picks max(32, 2 * k_eff + 1).
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t threads = 1;
};

/// Compares the block with the compressed kernel on seeded random inputs in
/// precision T, without checking any tolerance. `passed` reflects `tolerance`.
template <typename T>
EquivalenceReport measure_equivalence(const BasicBlockSpec<T>& block,
                                      const BasicCompressedKernel<T>& ck,
                                      const VerifyOptions& options);

/// 64-bit equivalence check; throws VerificationFailure when either mode's
/// relative error exceeds the tolerance.
EquivalenceReport verify_equivalence(const BlockSpec& block, const CompressedKernel& ck,
                                     const VerifyOptions& options);

/// Max |forward_block(x) - corr2d_same(x, ck)| over the whole frame,
/// borders included.
double full_frame_same_error(const BlockSpec& block, const CompressedKernel& ck,
                             const Tensor<double>& x);

}  // namespace lkmeta

#endif  // LKMETA_REPARAM_HPP_
