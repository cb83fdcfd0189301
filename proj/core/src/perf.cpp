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

#include "lkmeta/perf.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "json.hpp"
#include "lkmeta/parallel.hpp"
#include "lkmeta/random.hpp"
#include "lkmeta/reparam.hpp"

namespace lkmeta {

using nlohmann::json;

namespace {

void require_positive(std::initializer_list<std::uint64_t> args, const char* what) {
  for (auto a : args) {
    if (a == 0) throw ValidationError(std::string(what) + ": arguments must be positive");
  }
}

}  // namespace

std::uint64_t flops_conv(std::uint64_t h, std::uint64_t w, std::uint64_t ci, std::uint64_t co,
                         std::uint64_t kh, std::uint64_t kw) {
  require_positive({h, w, ci, co, kh, kw}, "flops_conv");
  return 2 * h * w * ci * co * kh * kw;
}

std::uint64_t flops_depthwise(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t kh,
                              std::uint64_t kw) {
  require_positive({h, w, c, kh, kw}, "flops_depthwise");
  return 2 * h * w * c * kh * kw;
}

FlopsBreakdown breakdown_from_stages(std::vector<StageFlops> stages) {
  FlopsBreakdown b;
  std::uint64_t offloaded = 0;
  for (const auto& s : stages) {
    b.total += s.flops;
    if (s.optical) {
      offloaded += s.flops;
      b.compressed_front += s.flops;
    } else {
      b.head += s.flops;
    }
  }
  b.digital = b.total - offloaded;
  b.offload_ratio = b.total ? static_cast<double>(offloaded) / static_cast<double>(b.total) : 0.0;
  b.stages = std::move(stages);
  return b;
}

std::uint64_t front_block_flops(const BlockSpec& front, std::size_t h, std::size_t w) {
  const std::uint64_t c = front.channels;
  const std::uint64_t elems = static_cast<std::uint64_t>(h) * w * c;
  std::uint64_t total = 0;
  for (const auto& br : front.branches) {
    for (const auto& l : br.layers) {
      total += flops_depthwise(h, w, c, l.kernel.kh(), l.kernel.kw()) + elems;
    }
  }
  return total + (front.branches.size() - 1) * elems;
}

FlopsBreakdown analyze_model(const ModelSpec& model, const FabricationLimits& limits) {
  validate_model(model);
  const std::size_t h = model.input_height, w = model.input_width, c = model.front.channels;
  const std::uint64_t elems = static_cast<std::uint64_t>(h) * w * c;
  const CompressedKernel ck = compress_block(model.front);
  std::vector<StageFlops> stages;
  stages.push_back({"front", flops_depthwise(h, w, c, ck.kernel.kh(), ck.kernel.kw()), true});
  std::uint64_t features = elems;
  for (std::size_t i = 0; i < model.head.size(); ++i) {
    const auto& st = model.head[i];
    const std::string name = std::string(head_op_name(st.op)) + "[" + std::to_string(i) + "]";
    std::uint64_t f = 0;
    switch (st.op) {
      case HeadOp::kBatchNorm: f = kBatchNormFlopsPerElement * elems; break;
      case HeadOp::kRelu: f = kReluFlopsPerElement * elems; break;
      case HeadOp::kFlatten: f = 0; break;
      case HeadOp::kDense: f = 2 * features * st.units + st.units; break;
      case HeadOp::kSoftmax: f = kSoftmaxFlopsPerClass * model.class_count; break;
      case HeadOp::kDepthwiseBlock: {
        const std::size_t k = max_effective_kernel_size(*st.block);
        f = flops_depthwise(h, w, c, k, k);
        break;
      }
    }
    stages.push_back({name, f, false});
  }
  FlopsBreakdown b = breakdown_from_stages(std::move(stages));
  b.front_block = front_block_flops(model.front, h, w);
  b.diagnostics = check_fabrication(model, split_kernel(ck.kernel), limits);
  b.fabricable = b.diagnostics.empty();
  return b;
}

namespace {

json breakdown_json(const FlopsBreakdown& b) {
  json j;
  j["front_block"] = b.front_block;
  j["compressed_front"] = b.compressed_front;
  j["head"] = b.head;
  j["total"] = b.total;
  j["digital"] = b.digital;
  j["offload_ratio"] = b.offload_ratio;
  j["fabricable"] = b.fabricable;
  j["stages"] = json::array();
  for (const auto& s : b.stages) {
    j["stages"].push_back({{"name", s.name}, {"flops", s.flops}, {"optical", s.optical}});
  }
  j["diagnostics"] = json::array();
  for (const auto& d : b.diagnostics) {
    j["diagnostics"].push_back({{"kind", violation_name(d.kind)}, {"message", d.message}});
  }
  return j;
}

}  // namespace

std::string FlopsBreakdown::to_json() const { return breakdown_json(*this).dump(2); }

ModelSpec sweep_model(std::size_t layers, std::size_t channels, const SweepOptions& options) {
  if (layers < 1) throw ValidationError("sweep: layer count must be >= 1");
  const std::uint64_t seed = derive_seed(options.seed, "sweep-" + std::to_string(layers) + "x" +
                                                           std::to_string(channels));
  ModelSpec m = make_model(make_block(channels, options.stacks, derive_seed(seed, "front")),
                           options.height, options.width, options.classes);
  std::vector<HeadStage> head;
  HeadStage bn, relu;
  bn.op = HeadOp::kBatchNorm;
  relu.op = HeadOp::kRelu;
  head.push_back(bn);
  head.push_back(relu);
  for (std::size_t l = 1; l < layers; ++l) {
    HeadStage blk;
    blk.op = HeadOp::kDepthwiseBlock;
    blk.block = make_block(channels, options.stacks, derive_seed(seed, "digital-" + std::to_string(l)));
    head.push_back(std::move(blk));
    head.push_back(bn);
    head.push_back(relu);
  }
  const auto tail = default_head(options.classes);
  head.insert(head.end(), tail.begin() + 2, tail.end());
  m.head = std::move(head);
  validate_model(m);
  return m;
}

SweepResult sweep_structures(const SweepOptions& options, const FabricationLimits& limits) {
  if (options.min_layers < 1 || options.min_layers > options.max_layers ||
      options.min_channels < 1 || options.min_channels > options.max_channels) {
    throw ValidationError("sweep: layer and channel ranges must be non-empty and positive");
  }
  SweepResult r;
  for (auto l = options.min_layers; l <= options.max_layers; ++l) r.layer_values.push_back(l);
  for (auto c = options.min_channels; c <= options.max_channels; ++c) r.channel_values.push_back(c);
  r.cells.resize(r.layer_values.size() * r.channel_values.size());
  parallel_for(r.cells.size(), options.threads, [&](std::size_t i) {
    SweepCell& cell = r.cells[i];
    cell.layers = r.layer_values[i / r.channel_values.size()];
    cell.channels = r.channel_values[i % r.channel_values.size()];
    const ModelSpec m = sweep_model(cell.layers, cell.channels, options);
    cell.flops = analyze_model(m, limits);
    if (options.accuracy) cell.accuracy = options.accuracy(m, cell.layers, cell.channels);
  });
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    const auto& c = r.cells[i];
    if (!c.flops.fabricable) continue;
    if (!r.best) {
      r.best = i;
      continue;
    }
    const auto& b = r.cells[*r.best];
    const auto key = [](const SweepCell& x) {
      return std::make_tuple(-x.flops.offload_ratio, x.flops.digital, x.layers, x.channels);
    };
    if (key(c) < key(b)) r.best = i;
  }
  return r;
}

const SweepCell& SweepResult::at(std::size_t layers, std::size_t channels) const {
  for (const auto& c : cells) {
    if (c.layers == layers && c.channels == channels) return c;
  }
  throw Error("sweep has no cell " + std::to_string(layers) + "x" + std::to_string(channels));
}

std::string SweepResult::to_csv() const {
  std::ostringstream os;
  os << "layers,channels,flops_front,flops_rest,offload_ratio,fabricable,accuracy\n";
  for (const auto& c : cells) {
    os << c.layers << ',' << c.channels << ',' << c.flops.compressed_front << ','
       << c.flops.digital << ',' << c.flops.offload_ratio << ',' << (c.flops.fabricable ? 1 : 0)
       << ',';
    if (c.accuracy) os << *c.accuracy;
    os << '\n';
  }
  return os.str();
}

std::string SweepResult::to_plot_data() const {
  std::ostringstream os;
  os << "# x=digital_flops y=layers size=offload_ratio fabricable channels\n";
  for (const auto& c : cells) {
    os << c.flops.digital << ' ' << c.layers << ' ' << c.flops.offload_ratio << ' '
       << (c.flops.fabricable ? 1 : 0) << ' ' << c.channels << '\n';
  }
  return os.str();
}

std::string SweepResult::to_json() const {
  json j;
  j["layers"] = layer_values;
  j["channels"] = channel_values;
  j["cells"] = json::array();
  for (const auto& c : cells) {
    json e = breakdown_json(c.flops);
    e.erase("stages");
    e["layers"] = c.layers;
    e["channel_count"] = c.channels;
    e["accuracy"] = c.accuracy ? json(*c.accuracy) : json(nullptr);
    j["cells"].push_back(e);
  }
  if (best) {
    j["best"] = {{"layers", cells[*best].layers}, {"channels", cells[*best].channels}};
  } else {
    j["best"] = nullptr;
  }
  return j.dump(2);
}

const char* inference_mode_name(InferenceMode mode) {
  return mode == InferenceMode::kDigital ? "digital" : "hybrid";
}

double quantile(std::vector<double> samples, double q) {
  if (samples.empty()) throw Error("quantile of an empty sample");
  std::sort(samples.begin(), samples.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return samples[lo] + frac * (samples[hi] - samples[lo]);
}

std::string TimingStats::to_json() const {
  json j;
  j["mode"] = inference_mode_name(mode);
  j["repetitions"] = repetitions;
  j["warmup"] = warmup;
  j["median_s"] = median_s;
  j["q1_s"] = q1_s;
  j["q3_s"] = q3_s;
  j["iqr_s"] = iqr_s;
  return j.dump(2);
}

TimingStats time_inference(const NaiveModel<float>& model, const Tensor<float>& batch,
                           InferenceMode mode, const TimingOptions& options) {
  if (options.repetitions < 1) throw ValidationError("timing: repetitions must be >= 1");
  auto compiled = model.with_front(block_from_kernel(compress_block(model.front_f64()).kernel));
  ForwardCache<float> cache;
  if (mode == InferenceMode::kHybrid) forward_front(compiled, batch, cache);
  auto run_once = [&] {
    if (mode == InferenceMode::kDigital) {
      forward(compiled, batch, cache, /*training=*/false);
    } else {
      forward_head(compiled, cache, /*training=*/false);
    }
  };
  for (std::size_t i = 0; i < options.warmup; ++i) run_once();
  TimingStats st;
  st.mode = mode;
  st.warmup = options.warmup;
  st.repetitions = options.repetitions;
  for (std::size_t i = 0; i < options.repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_once();
    st.samples_s.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  st.median_s = quantile(st.samples_s, 0.5);
  st.q1_s = quantile(st.samples_s, 0.25);
  st.q3_s = quantile(st.samples_s, 0.75);
  st.iqr_s = st.q3_s - st.q1_s;
  return st;
}

}  // namespace lkmeta
