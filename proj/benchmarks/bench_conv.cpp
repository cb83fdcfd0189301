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

#include <random>

#include "lkmeta/conv.hpp"
#include "lkmeta/random.hpp"
#include "lkmeta/tensor.hpp"

namespace {

template <typename T>
lkmeta::Tensor<T> uniform_tensor(lkmeta::Shape shape, std::uint64_t seed) {
  lkmeta::Tensor<T> t(std::move(shape));
  lkmeta::Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (T& v : t.storage()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
lkmeta::Kernel<T> uniform_kernel(std::size_t c, std::size_t k, std::uint64_t seed) {
  lkmeta::Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> w(c * k * k);
  for (T& v : w) v = static_cast<T>(u(rng));
  return lkmeta::Kernel<T>::depthwise(c, k, k, std::move(w));
}

// args: kernel size, channels; 28x28 planes.
template <typename T>
void BM_CorrelateSame(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  const auto x = uniform_tensor<T>({c, 28, 28}, 1);
  const auto w = uniform_kernel<T>(c, k, 2);
  for (auto _ : state) {
    auto y = lkmeta::corr2d_same(x, w);
    benchmark::DoNotOptimize(y.storage().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c * 28 * 28 * k * k));
}
BENCHMARK(BM_CorrelateSame<float>)->ArgsProduct({{3, 5, 7, 11}, {1, 12}});
BENCHMARK(BM_CorrelateSame<double>)->ArgsProduct({{3, 7}, {12}});

void BM_ConvolveFull(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  const auto a = uniform_kernel<double>(12, k, 3);
  const auto b = uniform_kernel<double>(12, k, 4);
  for (auto _ : state) {
    auto y = lkmeta::conv2d_full(a, b);
    benchmark::DoNotOptimize(y.storage().data());
  }
}
BENCHMARK(BM_ConvolveFull)->Arg(3)->Arg(5)->Arg(7);

}  // namespace

BENCHMARK_MAIN();
