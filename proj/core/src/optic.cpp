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

#include "lkmeta/optic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "json.hpp"
#include "lkmeta/random.hpp"

namespace lkmeta {

namespace {

double max_abs(const Kernel<double>& k) {
  double m = 0.0;
  for (double w : k.weights()) m = std::max(m, std::abs(w));
  return m;
}

template <typename Fn>
Kernel<double> map_weights(const Kernel<double>& k, Fn fn) {
  Kernel<double> out = k;
  for (double& w : out.weights()) w = fn(w);
  return out;
}

}  // namespace

SplitKernel split_kernel(const Kernel<double>& k) {
  return {map_weights(k, [](double w) { return w > 0.0 ? w : 0.0; }),
          map_weights(k, [](double w) { return w < 0.0 ? -w : 0.0; })};
}

BlockSpec split_as_block(const SplitKernel& split) {
  BlockSpec block;
  block.channels = split.positive.channels();
  const std::size_t c = block.channels;
  BranchSpec pos;
  pos.declaration_index = 0;
  pos.layers.push_back({split.positive, {std::vector<double>(c, 1.0)}});
  BranchSpec neg;
  neg.declaration_index = 1;
  neg.layers.push_back({split.negative, {std::vector<double>(c, -1.0)}});
  block.branches = {std::move(pos), std::move(neg)};
  validate_block(block);
  return block;
}

Kernel<double> sin2_weights(const SinSquareParam& p) {
  return map_weights(p.theta, [](double t) {
    const double s = std::sin(t);
    return s * s;
  });
}

Kernel<double> sin2_weights_grad(const SinSquareParam& p) {
  return map_weights(p.theta, [](double t) { return std::sin(2.0 * t); });
}

template <typename T>
Kernel<T> project_nonneg(const Kernel<T>& k) {
  Kernel<T> out = k;
  for (T& w : out.weights()) w = std::max(w, T{0});
  return out;
}

NonnegPenalty nonneg_penalty(const Kernel<double>& k) {
  NonnegPenalty p;
  for (double w : k.weights()) {
    if (w < 0.0) {
      p.hinge += -w;
      ++p.negative_count;
    }
  }
  return p;
}

Kernel<double> nonneg_penalty_grad(const Kernel<double>& k) {
  return map_weights(k, [](double w) { return w < 0.0 ? -1.0 : 0.0; });
}

std::pair<Kernel<double>, QuantSpec> quantize_kernel(const Kernel<double>& k, QuantSpec q) {
  if (q.bits < 2 || q.bits > 16) {
    throw Error("quantization bits must be in [2, 16], got " + std::to_string(q.bits));
  }
  const double m = max_abs(k);
  if (m == 0.0) {
    q.scale = 0.0;
    q.degenerate = true;
    return {k, q};
  }
  q.scale = m / static_cast<double>((1 << (q.bits - 1)) - 1);
  q.degenerate = false;
  return {quantize_with_scale(k, q), q};
}

Kernel<double> quantize_with_scale(const Kernel<double>& k, const QuantSpec& q) {
  if (q.degenerate) return k;
  if (!(q.scale > 0.0)) throw Error("quantize_with_scale: scale must be positive");
  const double levels = static_cast<double>((1 << (q.bits - 1)) - 1);
  return map_weights(k, [&](double w) {
    // std::round is half-away-from-zero.
    const double level = std::clamp(std::round(w / q.scale), -levels, levels);
    return level * q.scale;
  });
}

Kernel<double> inject_noise(const Kernel<double>& k, const NoiseSpec& n, NoiseRecord* record) {
  if (n.amplitude < 0.0) throw Error("noise amplitude must be non-negative");
  const double sigma = n.amplitude * max_abs(k);
  if (record) *record = {n.amplitude, sigma, n.seed, "relative-to-max-abs"};
  if (n.amplitude == 0.0 || sigma == 0.0) return k;
  Rng rng(n.seed);
  std::normal_distribution<double> dist(0.0, sigma);
  return map_weights(k, [&](double w) { return w + dist(rng); });
}

FabricationLimits FabricationLimits::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("$: malformed limits document: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("$: limits must be an object");
  FabricationLimits lim;
  auto count = [&](const char* key, std::size_t& into) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number_unsigned() || j.at(key).get<std::size_t>() == 0) {
      throw ParseError(std::string("$.") + key + ": expected a positive integer");
    }
    into = j.at(key).get<std::size_t>();
  };
  count("max_kernel_size", lim.max_kernel_size);
  count("max_channels", lim.max_channels);
  count("max_layers_fabricable", lim.max_layers_fabricable);
  count("input_channels", lim.input_channels);
  if (j.contains("weight_sign")) {
    const auto s = j.at("weight_sign").get<std::string>();
    if (s == "non-negative") lim.require_nonnegative = true;
    else if (s == "any") lim.require_nonnegative = false;
    else throw ParseError("$.weight_sign: expected \"non-negative\" or \"any\"");
  }
  return lim;
}

std::string FabricationLimits::to_json() const {
  return nlohmann::json{{"max_kernel_size", max_kernel_size},
                        {"max_channels", max_channels},
                        {"max_layers_fabricable", max_layers_fabricable},
                        {"input_channels", input_channels},
                        {"weight_sign", require_nonnegative ? "non-negative" : "any"}}
      .dump(2);
}

const char* violation_name(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::kKernelSize: return "kernel size";
    case ViolationKind::kChannels: return "channels";
    case ViolationKind::kNegativeWeights: return "negative weights";
    case ViolationKind::kNotFirstLayer: return "not first layer";
    case ViolationKind::kMultiChannelInput: return "multi-channel input";
    case ViolationKind::kTooManyLayers: return "too many layers";
  }
  return "?";
}

namespace {

Diagnostics check_common(const ModelSpec& model, const Kernel<double>& k,
                         const FabricationLimits& limits) {
  Diagnostics d;
  const std::size_t size = std::max(k.kh(), k.kw());
  if (size > limits.max_kernel_size) {
    d.push_back({ViolationKind::kKernelSize, "kernel size " + std::to_string(size) +
                                                 " exceeds limit " +
                                                 std::to_string(limits.max_kernel_size)});
  }
  if (k.channels() > limits.max_channels) {
    d.push_back({ViolationKind::kChannels, std::to_string(k.channels()) +
                                               " channels exceed limit " +
                                               std::to_string(limits.max_channels)});
  }
  if (model.front_index != 0) {
    d.push_back({ViolationKind::kNotFirstLayer,
                 "front block sits at stage " + std::to_string(model.front_index) +
                     "; only the first layer can be fabricated"});
  }
  if (model.input_channels != limits.input_channels) {
    d.push_back({ViolationKind::kMultiChannelInput,
                 "input has " + std::to_string(model.input_channels) + " channels; the lens takes " +
                     std::to_string(limits.input_channels)});
  }
  if (limits.max_layers_fabricable < 1) {
    d.push_back({ViolationKind::kTooManyLayers, "no fabricable layer budget"});
  }
  return d;
}

bool any_negative(const Kernel<double>& k) {
  return std::any_of(k.weights().begin(), k.weights().end(), [](double w) { return w < 0.0; });
}

}  // namespace

Diagnostics check_fabrication(const ModelSpec& model, const CompressedKernel& ck,
                              const FabricationLimits& limits) {
  Diagnostics d = check_common(model, ck.kernel, limits);
  if (limits.require_nonnegative && any_negative(ck.kernel)) {
    d.push_back({ViolationKind::kNegativeWeights,
                 "kernel has negative weights and is not split"});
  }
  return d;
}

Diagnostics check_fabrication(const ModelSpec& model, const SplitKernel& split,
                              const FabricationLimits& limits) {
  Diagnostics d = check_common(model, split.positive, limits);
  if (limits.require_nonnegative && (any_negative(split.positive) || any_negative(split.negative))) {
    d.push_back({ViolationKind::kNegativeWeights, "split part has negative weights"});
  }
  return d;
}

bool has_violation(const Diagnostics& d, ViolationKind kind) {
  return std::any_of(d.begin(), d.end(), [&](const Violation& v) { return v.kind == kind; });
}

Kernel<double> AdaptedKernel::effective() const {
  Kernel<double> out = positive;
  auto dst = out.weights();
  auto neg = negative.weights();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= neg[i];
  return out;
}

AdaptedKernel adapt_kernel(const ModelSpec& model, const CompressedKernel& ck,
                           const AdaptOptions& options, const FabricationLimits& limits) {
  AdaptedKernel out;
  Kernel<double> k = ck.kernel;
  if (options.bits) {
    auto [qk, qs] = quantize_kernel(k, QuantSpec{*options.bits});
    k = std::move(qk);
    out.quant = qs;
  }
  out.split = options.split;
  if (options.split) {
    SplitKernel s = split_kernel(k);
    out.positive = std::move(s.positive);
    out.negative = std::move(s.negative);
  } else {
    out.positive = k;
    out.negative = Kernel<double>::depthwise(k.channels(), k.kh(), k.kw());
  }
  if (options.noise.amplitude > 0.0) {
    NoiseRecord rec;
    if (options.split) {
      // Each part is its own lens; both share one sigma taken from the
      // pre-split kernel so the two parts see the same fabrication process.
      const double m = std::max(
          *std::max_element(out.positive.weights().begin(), out.positive.weights().end()),
          *std::max_element(out.negative.weights().begin(), out.negative.weights().end()));
      const double sigma = options.noise.amplitude * m;
      Rng rng(options.noise.seed);
      std::normal_distribution<double> dist(0.0, sigma > 0.0 ? sigma : 1.0);
      for (auto* part : {&out.positive, &out.negative}) {
        for (double& w : part->weights()) {
          if (sigma > 0.0) w = std::max(0.0, w + dist(rng));
        }
      }
      rec = {options.noise.amplitude, sigma, options.noise.seed, "relative-to-max-abs"};
    } else {
      out.positive = inject_noise(out.positive, options.noise, &rec);
    }
    out.noise = rec;
  }
  if (options.split) {
    out.diagnostics = check_fabrication(model, out.as_split(), limits);
  } else {
    out.diagnostics = check_fabrication(model, CompressedKernel{out.positive, ck.provenance}, limits);
  }
  return out;
}

template Kernel<float> project_nonneg(const Kernel<float>&);
template Kernel<double> project_nonneg(const Kernel<double>&);

}  // namespace lkmeta
