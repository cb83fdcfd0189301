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

#include <benchmark/benchmark.h>

#include "lkmeta/block.hpp"
#include "lkmeta/experiments.hpp"
#include "lkmeta/optic.hpp"
#include "lkmeta/reparam.hpp"

namespace {

// arg: index into the front presets.
void BM_CompressPreset(benchmark::State& state) {
  const auto& preset = lkmeta::front_presets().at(static_cast<std::size_t>(state.range(0)));
  const auto block = lkmeta::make_block(lkmeta::kPresetChannels, preset.stacks, 7);
  for (auto _ : state) {
    auto ck = lkmeta::compress_block(block);
    benchmark::DoNotOptimize(ck.kernel.storage().data());
  }
  state.SetLabel(preset.name);
}
BENCHMARK(BM_CompressPreset)->DenseRange(0, static_cast<int>(lkmeta::front_presets().size()) - 1);

void BM_MeasureEquivalence(benchmark::State& state) {
  const auto block = lkmeta::make_block(12, {{3, 3, 3}, {3, 3}, {3}}, 7);
  const auto ck = lkmeta::compress_block(block);
  lkmeta::VerifyOptions opt;
  opt.trials = 1;
  for (auto _ : state) {
    auto rep = lkmeta::measure_equivalence(block, ck, opt);
    benchmark::DoNotOptimize(rep);
  }
}
BENCHMARK(BM_MeasureEquivalence);

void BM_AdaptKernel(benchmark::State& state) {
  const auto ck = lkmeta::compress_block(lkmeta::make_block(12, {{3, 3, 3}, {3, 3}, {3}}, 7));
  for (auto _ : state) {
    auto q = lkmeta::quantize_kernel(ck.kernel, {}).first;
    auto s = lkmeta::split_kernel(q);
    benchmark::DoNotOptimize(s);
  }
}
BENCHMARK(BM_AdaptKernel);

}  // namespace

BENCHMARK_MAIN();
