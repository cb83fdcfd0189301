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

#include "lkmeta/block.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "lkmeta/conv.hpp"
#include "lkmeta/random.hpp"
#include "lkmeta/serialize.hpp"

namespace lkmeta {

using nlohmann::json;

const char* head_op_name(HeadOp op) {
  switch (op) {
    case HeadOp::kBatchNorm: return "batch_norm";
    case HeadOp::kRelu: return "relu";
    case HeadOp::kFlatten: return "flatten";
    case HeadOp::kDense: return "dense";
    case HeadOp::kSoftmax: return "softmax";
    case HeadOp::kDepthwiseBlock: return "depthwise_block";
  }
  return "?";
}

template <typename T>
std::size_t effective_kernel_size(const BasicBranch<T>& branch) {
  std::size_t k = 1;
  for (const auto& layer : branch.layers) k += layer.kernel.kh() - 1;
  return k;
}

template <typename T>
std::size_t max_effective_kernel_size(const BasicBlockSpec<T>& block) {
  std::size_t k = 0;
  for (const auto& b : block.branches) k = std::max(k, effective_kernel_size(b));
  return k;
}

template <typename T>
void validate_block(const BasicBlockSpec<T>& block) {
  if (block.channels == 0) throw ValidationError("channels: must be positive");
  if (block.branches.empty() || block.branches.size() > kMaxBranches) {
    throw ValidationError("branches: block needs 1 to " + std::to_string(kMaxBranches) +
                          " branches, got " + std::to_string(block.branches.size()));
  }
  for (std::size_t b = 0; b < block.branches.size(); ++b) {
    const auto& br = block.branches[b];
    const std::string bpath = "branches[" + std::to_string(b) + "]";
    if (br.layers.empty()) throw ValidationError(bpath + ".layers: branch needs at least one layer");
    for (std::size_t l = 0; l < br.layers.size(); ++l) {
      const auto& layer = br.layers[l];
      const std::string lpath = bpath + ".layers[" + std::to_string(l) + "]";
      const auto& k = layer.kernel;
      if (!k.is_depthwise()) throw ValidationError(lpath + ": kernel layout must be depthwise");
      if (k.kh() != k.kw()) throw ValidationError(lpath + ".kernel_size: kernel must be square");
      if (k.kh() % 2 == 0) {
        throw ValidationError(lpath + ".kernel_size: kernel size must be odd, got " +
                              std::to_string(k.kh()));
      }
      if (k.channels() != block.channels) {
        throw ValidationError(lpath + ": kernel has " + std::to_string(k.channels()) +
                              " channels, block has " + std::to_string(block.channels));
      }
      if (layer.scale.gamma.size() != block.channels) {
        throw ValidationError(lpath + ".scale: scale length " +
                              std::to_string(layer.scale.gamma.size()) +
                              " does not match channel count " + std::to_string(block.channels));
      }
      for (T g : layer.scale.gamma) {
        if (!std::isfinite(g)) throw ValidationError(lpath + ".scale: non-finite scale factor");
      }
      for (T w : k.weights()) {
        if (!std::isfinite(w)) throw ValidationError(lpath + ".weights: non-finite weight");
      }
    }
  }
}

void validate_model(const ModelSpec& model) {
  validate_block(model.front);
  if (model.class_count < 2) throw ValidationError("head.classes: need at least 2 classes");
  if (model.input_height < max_effective_kernel_size(model.front) ||
      model.input_width < max_effective_kernel_size(model.front)) {
    throw ValidationError("input: spatial size is smaller than the effective front kernel");
  }
  bool flattened = false;
  bool dense_seen = false;
  for (std::size_t i = 0; i < model.head.size(); ++i) {
    const auto& st = model.head[i];
    const std::string path = "head[" + std::to_string(i) + "]";
    switch (st.op) {
      case HeadOp::kDepthwiseBlock:
        if (flattened) throw ValidationError(path + ": convolution block after flatten");
        if (!st.block) throw ValidationError(path + ": depthwise block stage without a block");
        validate_block(*st.block);
        if (st.block->channels != model.front.channels) {
          throw ValidationError(path + ": digital block channel count differs from front");
        }
        break;
      case HeadOp::kBatchNorm:
      case HeadOp::kRelu:
        if (flattened) throw ValidationError(path + ": only dense and softmax may follow flatten");
        break;
      case HeadOp::kFlatten:
        if (flattened) throw ValidationError(path + ": duplicate flatten");
        flattened = true;
        break;
      case HeadOp::kDense:
        if (!flattened) throw ValidationError(path + ": dense layer before flatten");
        if (dense_seen) throw ValidationError(path + ": the head has a single dense layer");
        if (st.units != model.class_count) {
          throw ValidationError(path + ".units: the single dense layer must emit one logit per class");
        }
        dense_seen = true;
        break;
      case HeadOp::kSoftmax:
        if (i + 1 != model.head.size()) throw ValidationError(path + ": softmax must be last");
        if (!dense_seen) throw ValidationError(path + ": softmax without a dense layer");
        break;
    }
  }
}

namespace {

HeadStage stage(HeadOp op, std::size_t units = 0) {
  HeadStage s;
  s.op = op;
  s.units = units;
  return s;
}

std::vector<double> uniform_weights(std::size_t n, double half_width, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(-half_width, half_width);
  std::vector<double> w(n);
  for (auto& v : w) v = dist(rng);
  return w;
}

DepthwiseLayerSpec init_layer(std::size_t channels, std::size_t k, std::uint64_t seed) {
  const double a = std::sqrt(1.0 / static_cast<double>(k * k));
  return {Kernel<double>::depthwise(channels, k, k, uniform_weights(channels * k * k, a, seed)),
          {std::vector<double>(channels, 1.0)}};
}

std::uint64_t layer_seed(std::uint64_t seed, std::size_t branch, std::size_t layer) {
  return derive_seed(derive_seed(derive_seed(seed, "block-init"), branch), layer);
}

std::string join(const std::string& a, const std::string& b) { return a + b; }

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ParseError(path + ": " + what);
}

std::size_t get_count(const json& obj, const char* key, const std::string& path) {
  if (!obj.contains(key)) fail(path, std::string("missing key '") + key + "'");
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() <= 0) {
    fail(join(path, std::string(".") + key), "expected a positive integer");
  }
  return v.get<std::size_t>();
}

std::vector<double> number_array(const json& v, const std::string& path) {
  if (!v.is_array()) fail(path, "expected an array of numbers");
  std::vector<double> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) fail(path + "[" + std::to_string(i) + "]", "expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

DepthwiseLayerSpec parse_layer(const json& jl, std::size_t channels, std::uint64_t seed,
                               const ParseOptions& opt, const std::string& path) {
  if (!jl.is_object()) fail(path, "expected an object");
  const std::size_t k = get_count(jl, "kernel_size", path);
  DepthwiseLayerSpec layer = init_layer(channels, k, seed);
  if (jl.contains("weights") && jl.contains("weights_ref")) {
    fail(path, "give either 'weights' or 'weights_ref', not both");
  }
  if (jl.contains("weights")) {
    auto w = number_array(jl.at("weights"), path + ".weights");
    if (w.size() != channels * k * k) {
      throw ValidationError(path + ".weights: expected " + std::to_string(channels * k * k) +
                            " values (channels x kernel_size^2), got " + std::to_string(w.size()));
    }
    layer.kernel = Kernel<double>::depthwise(channels, k, k, std::move(w));
  } else if (jl.contains("weights_ref")) {
    if (!jl.at("weights_ref").is_string()) fail(path + ".weights_ref", "expected a path string");
    std::filesystem::path ref = jl.at("weights_ref").get<std::string>();
    if (ref.is_relative()) ref = opt.base_dir / ref;
    Kernel<double> kern = load_kernel<double>(ref);
    if (!kern.is_depthwise() || kern.kh() != k || kern.kw() != k || kern.channels() != channels) {
      throw ValidationError(path + ".weights_ref: kernel " + shape_to_string(kern.shape()) +
                            " does not match declared " + std::to_string(channels) + "x" +
                            std::to_string(k) + "x" + std::to_string(k));
    }
    layer.kernel = std::move(kern);
  }
  if (jl.contains("scale")) {
    const json& s = jl.at("scale");
    if (s.is_number()) {
      layer.scale.gamma.assign(channels, s.get<double>());
    } else {
      layer.scale.gamma = number_array(s, path + ".scale");
    }
  }
  return layer;
}

BlockSpec parse_block_json(const json& doc, const ParseOptions& opt, std::uint64_t seed,
                           const std::string& root) {
  if (!doc.is_object()) fail(root, "expected an object");
  BlockSpec block;
  block.channels = get_count(doc, "channels", root);
  if (!doc.contains("branches")) fail(root, "missing key 'branches'");
  const json& jb = doc.at("branches");
  if (!jb.is_array()) fail(root + ".branches", "expected an array");
  for (std::size_t b = 0; b < jb.size(); ++b) {
    const std::string bpath = root + ".branches[" + std::to_string(b) + "]";
    const json& br = jb[b];
    if (!br.is_object()) fail(bpath, "expected an object");
    BranchSpec branch;
    branch.declaration_index = b;
    if (br.contains("layers")) {
      const json& jl = br.at("layers");
      if (!jl.is_array()) fail(bpath + ".layers", "expected an array");
      for (std::size_t l = 0; l < jl.size(); ++l) {
        branch.layers.push_back(parse_layer(jl[l], block.channels, layer_seed(seed, b, l), opt,
                                            bpath + ".layers[" + std::to_string(l) + "]"));
      }
    } else if (br.contains("depth")) {
      // Shorthand for a stack of identical layers: {"depth": 3, "kernel_size": 3}.
      const std::size_t depth = get_count(br, "depth", bpath);
      json layer_doc = {{"kernel_size", br.value("kernel_size", 3)}};
      if (br.contains("scale")) layer_doc["scale"] = br.at("scale");
      for (std::size_t l = 0; l < depth; ++l) {
        branch.layers.push_back(parse_layer(layer_doc, block.channels, layer_seed(seed, b, l), opt,
                                            bpath + ".layers[" + std::to_string(l) + "]"));
      }
    } else {
      fail(bpath, "missing key 'layers' (or 'depth')");
    }
    block.branches.push_back(std::move(branch));
  }
  validate_block(block);
  return block;
}

json parse_document(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("$: malformed JSON: ") + e.what());
  }
}

std::uint64_t document_seed(const json& doc, const ParseOptions& opt) {
  if (doc.is_object() && doc.contains("seed")) {
    if (!doc.at("seed").is_number_unsigned()) fail("$.seed", "expected a non-negative integer");
    return doc.at("seed").get<std::uint64_t>();
  }
  return opt.seed;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

BlockSpec parse_block(std::string_view config_text, const ParseOptions& options) {
  const json doc = parse_document(config_text);
  return parse_block_json(doc, options, document_seed(doc, options), "$");
}

ModelSpec parse_model(std::string_view config_text, const ParseOptions& options) {
  const json doc = parse_document(config_text);
  const std::uint64_t seed = document_seed(doc, options);
  ModelSpec model;
  model.front = parse_block_json(doc, options, seed, "$");
  std::size_t digital_layers = 0;
  if (doc.contains("input")) {
    const json& in = doc.at("input");
    if (!in.is_object()) fail("$.input", "expected an object");
    if (in.contains("height")) model.input_height = get_count(in, "height", "$.input");
    if (in.contains("width")) model.input_width = get_count(in, "width", "$.input");
    if (in.contains("channels")) model.input_channels = get_count(in, "channels", "$.input");
  }
  if (doc.contains("front_index")) {
    if (!doc.at("front_index").is_number_unsigned()) fail("$.front_index", "expected an integer");
    model.front_index = doc.at("front_index").get<std::size_t>();
  }
  std::size_t dense_units = 0;
  if (doc.contains("head")) {
    const json& h = doc.at("head");
    if (!h.is_object()) fail("$.head", "expected an object");
    model.class_count = get_count(h, "classes", "$.head");
    dense_units = h.contains("dense_units") ? get_count(h, "dense_units", "$.head") : model.class_count;
    if (h.contains("digital_layers")) {
      if (!h.at("digital_layers").is_number_unsigned()) {
        fail("$.head.digital_layers", "expected a non-negative integer");
      }
      digital_layers = h.at("digital_layers").get<std::size_t>();
    }
  } else {
    dense_units = model.class_count;
  }
  model.head.push_back(stage(HeadOp::kBatchNorm));
  model.head.push_back(stage(HeadOp::kRelu));
  for (std::size_t d = 0; d < digital_layers; ++d) {
    HeadStage st = stage(HeadOp::kDepthwiseBlock);
    st.block = parse_block_json(doc, options, derive_seed(seed, "digital-" + std::to_string(d)), "$");
    model.head.push_back(std::move(st));
    model.head.push_back(stage(HeadOp::kBatchNorm));
    model.head.push_back(stage(HeadOp::kRelu));
  }
  model.head.push_back(stage(HeadOp::kFlatten));
  model.head.push_back(stage(HeadOp::kDense, dense_units));
  model.head.push_back(stage(HeadOp::kSoftmax));
  validate_model(model);
  return model;
}

BlockSpec load_block(const std::filesystem::path& path, std::uint64_t seed) {
  ParseOptions opt;
  opt.base_dir = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  opt.seed = seed;
  return parse_block(read_text(path), opt);
}

ModelSpec load_model(const std::filesystem::path& path, std::uint64_t seed) {
  ParseOptions opt;
  opt.base_dir = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  opt.seed = seed;
  return parse_model(read_text(path), opt);
}

std::string block_to_json(const BlockSpec& block) {
  json doc;
  doc["channels"] = block.channels;
  json branches = json::array();
  for (std::size_t idx : summation_order(block)) {
    const auto& br = block.branches[idx];
    json layers = json::array();
    for (const auto& l : br.layers) {
      layers.push_back({{"kernel_size", l.kernel.kh()},
                        {"weights", l.kernel.storage()},
                        {"scale", l.scale.gamma}});
    }
    branches.push_back({{"layers", layers}});
  }
  doc["branches"] = branches;
  return doc.dump(2);
}

BlockSpec make_block(std::size_t channels, const std::vector<std::vector<std::size_t>>& stacks,
                     std::uint64_t seed) {
  BlockSpec block;
  block.channels = channels;
  for (std::size_t b = 0; b < stacks.size(); ++b) {
    BranchSpec br;
    br.declaration_index = b;
    for (std::size_t l = 0; l < stacks[b].size(); ++l) {
      br.layers.push_back(init_layer(channels, stacks[b][l], layer_seed(seed, b, l)));
    }
    block.branches.push_back(std::move(br));
  }
  validate_block(block);
  return block;
}

BlockSpec block_from_kernel(const Kernel<double>& kernel) {
  BlockSpec block;
  block.channels = kernel.channels();
  BranchSpec br;
  br.layers.push_back({kernel, {std::vector<double>(kernel.channels(), 1.0)}});
  block.branches.push_back(std::move(br));
  validate_block(block);
  return block;
}

std::vector<HeadStage> default_head(std::size_t classes) {
  return {stage(HeadOp::kBatchNorm), stage(HeadOp::kRelu), stage(HeadOp::kFlatten),
          stage(HeadOp::kDense, classes), stage(HeadOp::kSoftmax)};
}

ModelSpec make_model(BlockSpec front, std::size_t height, std::size_t width, std::size_t classes) {
  ModelSpec m;
  m.front = std::move(front);
  m.head = default_head(classes);
  m.class_count = classes;
  m.input_height = height;
  m.input_width = width;
  validate_model(m);
  return m;
}

std::string block_hash(const BlockSpec& block) {
  std::uint64_t h = fnv1a64("lkmeta-block-v1");
  auto mix = [&](const void* p, std::size_t n) {
    h = fnv1a64(std::string_view(static_cast<const char*>(p), n), h);
  };
  mix(&block.channels, sizeof(block.channels));
  for (std::size_t idx : summation_order(block)) {
    const auto& br = block.branches[idx];
    const std::size_t depth = br.layers.size();
    mix(&depth, sizeof(depth));
    for (const auto& l : br.layers) {
      const std::size_t k = l.kernel.kh();
      mix(&k, sizeof(k));
      mix(l.kernel.weights().data(), l.kernel.size() * sizeof(double));
      mix(l.scale.gamma.data(), l.scale.gamma.size() * sizeof(double));
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
std::vector<std::size_t> summation_order(const BasicBlockSpec<T>& block) {
  std::vector<std::size_t> order(block.branches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return block.branches[a].declaration_index < block.branches[b].declaration_index;
  });
  return order;
}

namespace {

template <typename T>
void check_forward_input(const BasicBlockSpec<T>& block, const Tensor<T>& x) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("block input must be [C, H, W] or [N, C, H, W], got " +
                         shape_to_string(x.shape()));
  }
  if (x.channels() != 1 && x.channels() != block.channels) {
    throw DimensionError("channel axis: block has " + std::to_string(block.channels) +
                         " channels, input has " + std::to_string(x.channels()));
  }
  const std::size_t k = max_effective_kernel_size(block);
  if (x.height() < k) {
    throw DimensionError("height axis: input height " + std::to_string(x.height()) +
                         " is smaller than effective kernel " + std::to_string(k));
  }
  if (x.width() < k) {
    throw DimensionError("width axis: input width " + std::to_string(x.width()) +
                         " is smaller than effective kernel " + std::to_string(k));
  }
}

template <typename T>
void apply_scale(Tensor<T>& y, const std::vector<T>& gamma) {
  const std::size_t c = y.channels();
  const std::size_t planes = y.size() / (y.height() * y.width());
  for (std::size_t p = 0; p < planes; ++p) {
    const T g = gamma[p % c];
    for (T& v : y.plane(p)) v *= g;
  }
}

template <typename T>
Tensor<T> center_crop(const Tensor<T>& y, std::size_t oh, std::size_t ow) {
  if (y.height() == oh && y.width() == ow) return y;
  const std::size_t dy = (y.height() - oh) / 2;
  const std::size_t dx = (y.width() - ow) / 2;
  Shape shape = y.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Tensor<T> out(shape);
  const std::size_t planes = y.size() / (y.height() * y.width());
  for (std::size_t p = 0; p < planes; ++p) {
    auto src = y.plane(p);
    auto dst = out.plane(p);
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) dst[i * ow + j] = src[(i + dy) * y.width() + j + dx];
    }
  }
  return out;
}

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& y) {
  auto a = acc.data();
  auto b = y.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace

template <typename T>
Tensor<T> forward_block(const BasicBlockSpec<T>& block, const Tensor<T>& x) {
  check_forward_input(block, x);
  std::optional<Tensor<T>> sum;
  for (std::size_t idx : summation_order(block)) {
    const auto& br = block.branches[idx];
    Tensor<T> a = x;
    for (const auto& layer : br.layers) {
      a = corr2d_same(a, layer.kernel);
      apply_scale(a, layer.scale.gamma);
    }
    if (!sum) sum = std::move(a); else add_into(*sum, a);
  }
  return std::move(*sum);
}

template <typename T>
Tensor<T> forward_block_valid(const BasicBlockSpec<T>& block, const Tensor<T>& x) {
  check_forward_input(block, x);
  const std::size_t k = max_effective_kernel_size(block);
  const std::size_t oh = x.height() - k + 1;
  const std::size_t ow = x.width() - k + 1;
  std::optional<Tensor<T>> sum;
  for (std::size_t idx : summation_order(block)) {
    const auto& br = block.branches[idx];
    Tensor<T> a = x;
    for (const auto& layer : br.layers) {
      a = corr2d_valid(a, layer.kernel);
      apply_scale(a, layer.scale.gamma);
    }
    a = center_crop(a, oh, ow);
    if (!sum) sum = std::move(a); else add_into(*sum, a);
  }
  return std::move(*sum);
}

#define LKMETA_INSTANTIATE_BLOCK(T)                                                      \
  template std::size_t effective_kernel_size(const BasicBranch<T>&);                      \
  template std::size_t max_effective_kernel_size(const BasicBlockSpec<T>&);               \
  template void validate_block(const BasicBlockSpec<T>&);                                 \
  template Tensor<T> forward_block(const BasicBlockSpec<T>&, const Tensor<T>&);           \
  template Tensor<T> forward_block_valid(const BasicBlockSpec<T>&, const Tensor<T>&);     \
  template std::vector<std::size_t> summation_order(const BasicBlockSpec<T>&);

LKMETA_INSTANTIATE_BLOCK(float)
LKMETA_INSTANTIATE_BLOCK(double)

#undef LKMETA_INSTANTIATE_BLOCK

}  // namespace lkmeta
