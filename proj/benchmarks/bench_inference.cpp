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
#include "lkmeta/dataset.hpp"
#include "lkmeta/experiments.hpp"
#include "lkmeta/trainer.hpp"

namespace {

lkmeta::NaiveModel<float> preset_model(const std::string& name) {
  const auto& p = lkmeta::find_preset(name);
  return lkmeta::NaiveModel<float>(
      lkmeta::make_model(lkmeta::make_block(lkmeta::kPresetChannels, p.stacks, 3), 28, 28, 10),
      lkmeta::ConstraintMode::kNone, 3);
}

lkmeta::Tensor<float> image_batch(std::size_t n) {
  lkmeta::SynthSpec s;
  s.classes = 10;
  s.per_class = (n + 9) / 10;
  s.seed = 5;
  const auto d = lkmeta::synth_dataset(s);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  return lkmeta::gather_batch<float>(d, order, 0, n, nullptr);
}

// Full digital pass: compressed front plus head. arg: batch size.
void BM_DigitalInference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto base = preset_model("naive7");
  auto m = base.with_front(lkmeta::block_from_kernel(lkmeta::compress_block(base.front_f64()).kernel));
  const auto x = image_batch(n);
  lkmeta::ForwardCache<float> cache;
  for (auto _ : state) {
    auto p = lkmeta::forward(m, x, cache, false);
    benchmark::DoNotOptimize(p.data());
  }
}
BENCHMARK(BM_DigitalInference)->Arg(1)->Arg(64);

// Hybrid pass: the optical front output is precomputed, only the head runs.
void BM_HybridInference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto m = preset_model("naive7");
  const auto x = image_batch(n);
  lkmeta::ForwardCache<float> cache;
  lkmeta::forward_front(m, x, cache);
  for (auto _ : state) {
    auto p = lkmeta::forward_head(m, cache, false);
    benchmark::DoNotOptimize(p.data());
  }
}
BENCHMARK(BM_HybridInference)->Arg(1)->Arg(64);

void BM_TrainStep(benchmark::State& state) {
  auto m = lkmeta::NaiveModel<float>(
      lkmeta::make_model(lkmeta::make_block(12, {{3, 3, 3}, {3, 3}, {3}}, 3), 28, 28, 10),
      lkmeta::ConstraintMode::kNone, 3);
  lkmeta::SynthSpec s;
  s.classes = 10;
  s.per_class = 7;
  const auto d = lkmeta::synth_dataset(s);
  std::vector<std::size_t> order(64);
  for (std::size_t i = 0; i < 64; ++i) order[i] = i;
  std::vector<int> labels;
  const auto x = lkmeta::gather_batch<float>(d, order, 0, 64, &labels);
  lkmeta::TrainConfig cfg;
  lkmeta::ForwardCache<float> cache;
  for (auto _ : state) {
    lkmeta::forward(m, x, cache, true, true);
    lkmeta::backward(m, cache, labels, 0.0);
    lkmeta::sgd_step(m, cfg);
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();
