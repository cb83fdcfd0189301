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

#include "lkmeta/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "lkmeta/conv.hpp"
#include "lkmeta/parallel.hpp"
#include "lkmeta/random.hpp"

namespace lkmeta {

template <typename T>
Kernel<T> fold_scales(const BasicDepthwiseLayer<T>& layer) {
  Kernel<T> k = layer.kernel;
  if (layer.scale.gamma.size() != k.channels()) {
    throw DimensionError("channel axis: scale has " + std::to_string(layer.scale.gamma.size()) +
                         " entries, kernel has " + std::to_string(k.channels()) + " channels");
  }
  for (std::size_t c = 0; c < k.channels(); ++c) {
    const T g = layer.scale.gamma[c];
    for (T& w : k.plane(c)) w *= g;
  }
  return k;
}

template <typename T>
Kernel<T> collapse_stack(const BasicBranch<T>& branch) {
  if (branch.layers.empty()) throw ValidationError("collapse_stack: branch has no layers");
  Kernel<T> acc = fold_scales(branch.layers.front());
  for (std::size_t l = 1; l < branch.layers.size(); ++l) {
    acc = conv2d_full(acc, fold_scales(branch.layers[l]));
  }
  return acc;
}

template <typename T>
BasicCompressedKernel<T> merge_branches(std::span<const Kernel<T>> kernels) {
  if (kernels.empty()) throw ValidationError("merge_branches: no kernels to merge");
  std::size_t kh = 0, kw = 0;
  for (const auto& k : kernels) {
    if (!k.is_depthwise()) throw DimensionError("layout: merge_branches needs depthwise kernels");
    if (k.channels() != kernels.front().channels()) {
      throw DimensionError("channel axis: merging kernels with " +
                           std::to_string(kernels.front().channels()) + " and " +
                           std::to_string(k.channels()) + " channels");
    }
    if (!k.has_odd_extents()) throw UnsupportedKernelError("merge_branches needs odd kernel sizes");
    kh = std::max(kh, k.kh());
    kw = std::max(kw, k.kw());
  }
  BasicCompressedKernel<T> out{pad_center(kernels.front(), kh, kw), {}};
  for (std::size_t i = 1; i < kernels.size(); ++i) {
    const Kernel<T> p = pad_center(kernels[i], kh, kw);
    auto dst = out.kernel.weights();
    auto src = p.weights();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  out.provenance.passes = {kMergeBranchesPass};
  return out;
}

template <typename T>
BasicCompressedKernel<T> compress_block(const BasicBlockSpec<T>& block) {
  validate_block(block);
  std::vector<Kernel<T>> collapsed;
  for (std::size_t idx : summation_order(block)) {
    collapsed.push_back(collapse_stack(block.branches[idx]));
  }
  BasicCompressedKernel<T> out = merge_branches<T>(collapsed);
  out.provenance.passes = {kFoldScalesPass, kCollapseStackPass, kMergeBranchesPass};
  if constexpr (std::is_same_v<T, double>) {
    out.provenance.block_hash = block_hash(block);
  } else {
    out.provenance.block_hash = block_hash(block_cast<double>(block));
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> random_input(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor<T> x(Shape{1, h, w});
  for (T& v : x.data()) v = static_cast<T>(dist(rng));
  return x;
}

template <typename T>
ModeError compare(const Tensor<T>& ref, const Tensor<T>& got, std::size_t margin) {
  ModeError e;
  double ref_max = 0.0;
  const std::size_t h = ref.height(), w = ref.width();
  const std::size_t planes = ref.size() / (h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    auto a = ref.plane(p);
    auto b = got.plane(p);
    for (std::size_t i = margin; i + margin < h; ++i) {
      for (std::size_t j = margin; j + margin < w; ++j) {
        const double r = static_cast<double>(a[i * w + j]);
        const double g = static_cast<double>(b[i * w + j]);
        e.max_abs_err = std::max(e.max_abs_err, std::abs(r - g));
        ref_max = std::max(ref_max, std::abs(r));
      }
    }
  }
  e.max_rel_err = ref_max > 0.0 ? e.max_abs_err / ref_max : e.max_abs_err;
  return e;
}

void fold_max(ModeError& into, const ModeError& e) {
  into.max_abs_err = std::max(into.max_abs_err, e.max_abs_err);
  into.max_rel_err = std::max(into.max_rel_err, e.max_rel_err);
}

}  // namespace

template <typename T>
EquivalenceReport measure_equivalence(const BasicBlockSpec<T>& block,
                                      const BasicCompressedKernel<T>& ck,
                                      const VerifyOptions& options) {
  validate_block(block);
  const std::size_t k = ck.kernel.kh();
  if (ck.kernel.channels() != block.channels) {
    throw DimensionError("channel axis: compressed kernel has " +
                         std::to_string(ck.kernel.channels()) + " channels, block has " +
                         std::to_string(block.channels));
  }
  if (k != max_effective_kernel_size(block) || ck.kernel.kw() != k) {
    throw DimensionError("kernel size " + std::to_string(k) +
                         " does not match the block's effective size " +
                         std::to_string(max_effective_kernel_size(block)));
  }
  const std::size_t trials = std::max<std::size_t>(options.trials, 1);
  const std::size_t h = options.height ? options.height : std::max<std::size_t>(32, 2 * k + 1);
  const std::size_t w = options.width ? options.width : std::max<std::size_t>(32, 2 * k + 1);
  const std::size_t margin = (k - 1) / 2;

  std::vector<ModeError> valid(trials), same(trials);
  parallel_for(trials, options.threads, [&](std::size_t t) {
    const Tensor<T> x = random_input<T>(h, w, derive_seed(options.seed, t));
    valid[t] = compare(forward_block_valid(block, x), corr2d_valid(x, ck.kernel), 0);
    same[t] = compare(forward_block(block, x), corr2d_same(x, ck.kernel), margin);
  });

  EquivalenceReport report;
  for (std::size_t t = 0; t < trials; ++t) {
    fold_max(report.valid, valid[t]);
    fold_max(report.same_interior, same[t]);
  }
  report.trials = trials;
  report.margin = margin;
  report.tolerance = options.tolerance;
  report.dtype = dtype_name(dtype_of<T>());
  report.passed = report.valid.max_rel_err <= options.tolerance &&
                  report.same_interior.max_rel_err <= options.tolerance;
  return report;
}

EquivalenceReport verify_equivalence(const BlockSpec& block, const CompressedKernel& ck,
                                     const VerifyOptions& options) {
  EquivalenceReport report = measure_equivalence(block, ck, options);
  if (!report.passed) throw VerificationFailure(report);
  return report;
}

double full_frame_same_error(const BlockSpec& block, const CompressedKernel& ck,
                             const Tensor<double>& x) {
  return compare(forward_block(block, x), corr2d_same(x, ck.kernel), 0).max_abs_err;
}

VerificationFailure::VerificationFailure(EquivalenceReport report)
    : Error("equivalence verification failed:\n" + report.to_text()), report_(std::move(report)) {}

std::string EquivalenceReport::to_text() const {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific;
  os << "equivalence report (" << dtype << ", " << trials << " trials, tol " << tolerance << ")\n"
     << "  valid          max_abs " << valid.max_abs_err << "  max_rel " << valid.max_rel_err << '\n'
     << "  same-interior  max_abs " << same_interior.max_abs_err << "  max_rel "
     << same_interior.max_rel_err << "  (margin " << margin << " px)\n"
     << "  result: " << (passed ? "PASS" : "FAIL") << '\n';
  return os.str();
}

std::string EquivalenceReport::to_json() const {
  nlohmann::json j = {
      {"trials", trials},
      {"tolerance", tolerance},
      {"dtype", dtype},
      {"margin", margin},
      {"passed", passed},
      {"modes",
       {{"valid", {{"max_abs_err", valid.max_abs_err}, {"max_rel_err", valid.max_rel_err}}},
        {"same-interior",
         {{"max_abs_err", same_interior.max_abs_err},
          {"max_rel_err", same_interior.max_rel_err}}}}}};
  return j.dump(2);
}

#define LKMETA_INSTANTIATE_REPARAM(T)                                                    \
  template Kernel<T> fold_scales(const BasicDepthwiseLayer<T>&);                          \
  template Kernel<T> collapse_stack(const BasicBranch<T>&);                               \
  template BasicCompressedKernel<T> merge_branches(std::span<const Kernel<T>>);           \
  template BasicCompressedKernel<T> compress_block(const BasicBlockSpec<T>&);             \
  template EquivalenceReport measure_equivalence(const BasicBlockSpec<T>&,                \
                                                 const BasicCompressedKernel<T>&,         \
                                                 const VerifyOptions&);

LKMETA_INSTANTIATE_REPARAM(float)
LKMETA_INSTANTIATE_REPARAM(double)

#undef LKMETA_INSTANTIATE_REPARAM

}  // namespace lkmeta
