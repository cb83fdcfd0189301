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

#include "lkmeta/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "lkmeta/conv.hpp"
#include "lkmeta/random.hpp"
#include "lkmeta/reparam.hpp"
#include "lkmeta/serialize.hpp"

namespace lkmeta {

using nlohmann::json;

const char* constraint_name(ConstraintMode mode) {
  switch (mode) {
    case ConstraintMode::kNone: return "none";
    case ConstraintMode::kSin2: return "sin2";
    case ConstraintMode::kMask: return "mask";
    case ConstraintMode::kPenalty: return "penalty";
    case ConstraintMode::kSplit: return "split";
  }
  return "?";
}

ConstraintMode parse_constraint(const std::string& name) {
  for (auto m : {ConstraintMode::kNone, ConstraintMode::kSin2, ConstraintMode::kMask,
                 ConstraintMode::kPenalty, ConstraintMode::kSplit}) {
    if (name == constraint_name(m)) return m;
  }
  throw ParseError("unknown constraint mode '" + name +
                   "' (expected none, sin2, mask, penalty or split)");
}

const char* param_class_name(ParamClass cls) {
  switch (cls) {
    case ParamClass::kFrontKernel: return "front_kernel";
    case ParamClass::kFrontGamma: return "front_gamma";
    case ParamClass::kFrontTheta: return "front_theta";
    case ParamClass::kFrontPositive: return "front_positive";
    case ParamClass::kFrontNegative: return "front_negative";
    case ParamClass::kBnGamma: return "bn_gamma";
    case ParamClass::kBnBeta: return "bn_beta";
    case ParamClass::kDenseWeight: return "dense_weight";
    case ParamClass::kDenseBias: return "dense_bias";
  }
  return "?";
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be > 0");
  }
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0, 1)");
  if (!(penalty_lambda >= 0.0)) throw ValidationError("penalty_lambda must be >= 0");
  for (const auto& a : ablations) {
    if (a.bits && (*a.bits < 2 || *a.bits > 16)) {
      throw ValidationError("ablation bits must be in [2, 16]");
    }
    if (!(a.noise_amplitude >= 0.0)) throw ValidationError("ablation noise must be >= 0");
    if (a.draws < 1) throw ValidationError("ablation draws must be >= 1");
  }
}

namespace {

json ablation_json(const AblationPoint& a) {
  json j;
  j["bits"] = a.bits ? json(*a.bits) : json(nullptr);
  j["noise"] = a.noise_amplitude;
  j["split"] = a.split;
  j["draws"] = a.draws;
  return j;
}

json config_json(const TrainConfig& c) {
  json j;
  j["learning_rate"] = c.learning_rate;
  j["momentum"] = c.momentum;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["dtype"] = dtype_name(c.dtype);
  j["constraint"] = constraint_name(c.constraint);
  j["penalty_lambda"] = c.penalty_lambda;
  j["train_subset"] = c.train_subset;
  j["test_subset"] = c.test_subset;
  j["eval_each_epoch"] = c.eval_each_epoch;
  j["ablations"] = json::array();
  for (const auto& a : c.ablations) j["ablations"].push_back(ablation_json(a));
  return j;
}

}  // namespace

std::string TrainConfig::to_json() const { return config_json(*this).dump(2); }

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("train config: $ must be an object");
  TrainConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "momentum") c.momentum = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (k == "epochs") c.epochs = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "dtype") c.dtype = parse_dtype(v.get<std::string>());
      else if (k == "constraint") c.constraint = parse_constraint(v.get<std::string>());
      else if (k == "penalty_lambda") c.penalty_lambda = v.get<double>();
      else if (k == "train_subset") c.train_subset = v.get<std::size_t>();
      else if (k == "test_subset") c.test_subset = v.get<std::size_t>();
      else if (k == "eval_each_epoch") c.eval_each_epoch = v.get<bool>();
      else if (k == "ablations") {
        for (const auto& a : v) {
          AblationPoint p;
          if (a.contains("bits") && !a.at("bits").is_null()) p.bits = a.at("bits").get<int>();
          p.noise_amplitude = a.value("noise", 0.0);
          p.split = a.value("split", true);
          p.draws = a.value("draws", std::size_t{1});
          c.ablations.push_back(p);
        }
      } else {
        throw ParseError("train config: $." + k + ": unknown key");
      }
    }
  } catch (const json::type_error& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ----------------------------------------------------------------- model

template <typename T>
NaiveModel<T>::NaiveModel(const ModelSpec& spec, ConstraintMode mode, std::uint64_t seed)
    : mode_(mode), height_(spec.input_height), width_(spec.input_width), classes_(spec.class_count) {
  validate_model(spec);
  const std::vector<HeadOp> expected{HeadOp::kBatchNorm, HeadOp::kRelu, HeadOp::kFlatten,
                                     HeadOp::kDense, HeadOp::kSoftmax};
  std::vector<HeadOp> got;
  for (const auto& st : spec.head) got.push_back(st.op);
  if (got != expected) {
    throw ValidationError("head: trainer supports batch_norm, relu, flatten, dense, softmax only");
  }
  if (spec.input_channels != 1) {
    throw ValidationError("input.channels: trainer expects single-channel images");
  }
  init_params(block_cast<T>(spec.front), seed);
}

template <typename T>
std::size_t NaiveModel<T>::add_param(std::string name, ParamClass cls, std::vector<T> value) {
  Param<T> p;
  p.name = std::move(name);
  p.cls = cls;
  p.grad.assign(value.size(), T{0});
  p.velocity.assign(value.size(), T{0});
  p.value = std::move(value);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

template <typename T>
void NaiveModel<T>::init_params(const BasicBlockSpec<T>& front, std::uint64_t seed) {
  front_ = front;
  params_.clear();
  layer_refs_.clear();
  for (std::size_t b = 0; b < front_.branches.size(); ++b) {
    std::vector<LayerRef> refs;
    for (std::size_t l = 0; l < front_.branches[b].layers.size(); ++l) {
      const auto& layer = front_.branches[b].layers[l];
      const std::string base = "front.b" + std::to_string(b) + ".l" + std::to_string(l);
      const auto& w = layer.kernel.storage();
      LayerRef r;
      switch (mode_) {
        case ConstraintMode::kSin2: {
          std::vector<T> theta(w.size());
          for (std::size_t i = 0; i < w.size(); ++i) {
            theta[i] = static_cast<T>(std::asin(std::sqrt(std::abs(static_cast<double>(w[i])))));
          }
          r.kernel = add_param(base + ".theta", ParamClass::kFrontTheta, std::move(theta));
          break;
        }
        case ConstraintMode::kSplit: {
          std::vector<T> pos(w.size()), neg(w.size());
          for (std::size_t i = 0; i < w.size(); ++i) {
            pos[i] = std::max(w[i], T{0});
            neg[i] = std::max(-w[i], T{0});
          }
          r.kernel = add_param(base + ".positive", ParamClass::kFrontPositive, std::move(pos));
          r.aux = add_param(base + ".negative", ParamClass::kFrontNegative, std::move(neg));
          break;
        }
        default:
          r.kernel = add_param(base + ".kernel", ParamClass::kFrontKernel, w);
      }
      r.gamma = add_param(base + ".gamma", ParamClass::kFrontGamma, layer.scale.gamma);
      refs.push_back(r);
    }
    layer_refs_.push_back(std::move(refs));
  }
  const std::size_t c = front_.channels;
  bn_gamma_ = add_param("bn.gamma", ParamClass::kBnGamma, std::vector<T>(c, T{1}));
  bn_beta_ = add_param("bn.beta", ParamClass::kBnBeta, std::vector<T>(c, T{0}));
  const std::size_t f = features();
  std::vector<T> wd(classes_ * f);
  Rng rng(derive_seed(seed, "dense-init"));
  const double bound = 1.0 / std::sqrt(static_cast<double>(f));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : wd) v = static_cast<T>(dist(rng));
  dense_w_ = add_param("dense.weight", ParamClass::kDenseWeight, std::move(wd));
  dense_b_ = add_param("dense.bias", ParamClass::kDenseBias, std::vector<T>(classes_, T{0}));
  running_mean_.assign(c, T{0});
  running_var_.assign(c, T{1});
  apply_constraint(*this);
}

template <typename T>
Param<T>& NaiveModel<T>::param(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error("no parameter named '" + name + "'");
}

template <typename T>
const Param<T>& NaiveModel<T>::param(const std::string& name) const {
  return const_cast<NaiveModel*>(this)->param(name);
}

template <typename T>
void NaiveModel<T>::sync_front() {
  for (std::size_t b = 0; b < front_.branches.size(); ++b) {
    for (std::size_t l = 0; l < front_.branches[b].layers.size(); ++l) {
      auto& layer = front_.branches[b].layers[l];
      const LayerRef& r = layer_refs_[b][l];
      auto& w = layer.kernel.storage();
      const auto& main = params_[r.kernel].value;
      switch (mode_) {
        case ConstraintMode::kSin2:
          for (std::size_t i = 0; i < w.size(); ++i) {
            const T s = std::sin(main[i]);
            w[i] = s * s;
          }
          break;
        case ConstraintMode::kSplit: {
          const auto& neg = params_[r.aux].value;
          for (std::size_t i = 0; i < w.size(); ++i) w[i] = main[i] - neg[i];
          break;
        }
        default:
          w = main;
      }
      layer.scale.gamma = params_[r.gamma].value;
    }
  }
}

template <typename T>
NaiveModel<T> NaiveModel<T>::with_front(const BlockSpec& front) const {
  if (front.channels != channels()) {
    throw DimensionError("channel axis: replacement front has " + std::to_string(front.channels) +
                         " channels, model expects " + std::to_string(channels()));
  }
  validate_block(front);
  NaiveModel m;
  m.mode_ = ConstraintMode::kNone;
  m.height_ = height_;
  m.width_ = width_;
  m.classes_ = classes_;
  m.init_params(block_cast<T>(front), 0);
  m.params_[m.bn_gamma_].value = params_[bn_gamma_].value;
  m.params_[m.bn_beta_].value = params_[bn_beta_].value;
  m.params_[m.dense_w_].value = params_[dense_w_].value;
  m.params_[m.dense_b_].value = params_[dense_b_].value;
  m.running_mean_ = running_mean_;
  m.running_var_ = running_var_;
  m.sync_front();
  return m;
}

// --------------------------------------------------------------- forward

template <typename T>
void forward_front(const NaiveModel<T>& model, const Tensor<T>& batch, ForwardCache<T>& cache) {
  if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != model.height() ||
      batch.dim(3) != model.width()) {
    throw DimensionError("batch shape " + shape_to_string(batch.shape()) + " does not match [N, 1, " +
                         std::to_string(model.height()) + ", " + std::to_string(model.width()) +
                         "]");
  }
  const std::size_t n = batch.dim(0);
  const std::size_t c = model.channels();
  const std::size_t h = model.height(), w = model.width(), hw = h * w;
  const auto& front = model.front();
  cache.batch = n;
  cache.input = batch;
  cache.layer_in.assign(front.branches.size(), {});
  cache.layer_conv.assign(front.branches.size(), {});
  cache.front_out = Tensor<T>(Shape{n, c, h, w});

  for (std::size_t b : summation_order(front)) {
    const auto& layers = front.branches[b].layers;
    auto& ins = cache.layer_in[b];
    auto& convs = cache.layer_conv[b];
    ins.resize(layers.size());
    convs.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& k = layers[l].kernel;
      const auto& g = layers[l].scale.gamma;
      convs[l] = Tensor<T>(Shape{n, c, h, w});
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          auto src = l == 0 ? cache.input.plane(s) : std::span<const T>(ins[l].plane(s * c + ch));
          plane::correlate_same<T>(src, h, w, k.plane(ch), k.kh(), k.kw(), convs[l].plane(s * c + ch));
        }
      }
      // Scaled output feeds the next layer, or the block sum after the last.
      Tensor<T>* dst = nullptr;
      if (l + 1 < layers.size()) {
        ins[l + 1] = Tensor<T>(Shape{n, c, h, w});
        dst = &ins[l + 1];
      }
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          auto cv = convs[l].plane(s * c + ch);
          auto out = dst ? dst->plane(s * c + ch) : cache.front_out.plane(s * c + ch);
          const T gm = g[ch];
          if (dst) {
            for (std::size_t i = 0; i < hw; ++i) out[i] = gm * cv[i];
          } else {
            for (std::size_t i = 0; i < hw; ++i) out[i] += gm * cv[i];
          }
        }
      }
    }
  }

}

template <typename T>
std::vector<T> forward_head(NaiveModel<T>& model, ForwardCache<T>& cache, bool training,
                            bool update_running) {
  const std::size_t n = cache.batch;
  const std::size_t c = model.channels();
  const std::size_t h = model.height(), w = model.width(), hw = h * w;
  if (cache.front_out.rank() != 4 || cache.front_out.dim(0) != n || cache.front_out.dim(1) != c ||
      cache.front_out.dim(2) != h || cache.front_out.dim(3) != w) {
    throw DimensionError("front output does not match the model head");
  }
  cache.training = training;

  // Batch norm over (N, H, W) per channel, then ReLU.
  const auto& bn_g = model.params()[model.bn_gamma_index()].value;
  const auto& bn_b = model.params()[model.bn_beta_index()].value;
  cache.bn_mean.assign(c, T{0});
  cache.bn_inv_std.assign(c, T{0});
  const double m = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (training) {
      double sum = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        for (T v : cache.front_out.plane(s * c + ch)) sum += v;
      }
      mean = sum / m;
      double sq = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        for (T v : cache.front_out.plane(s * c + ch)) sq += (v - mean) * (v - mean);
      }
      var = sq / m;
      if (update_running) {
        const double mom = NaiveModel<T>::kBnMomentum;
        const double unbiased = m > 1 ? var * m / (m - 1.0) : var;
        model.running_mean()[ch] =
            static_cast<T>((1.0 - mom) * model.running_mean()[ch] + mom * mean);
        model.running_var()[ch] =
            static_cast<T>((1.0 - mom) * model.running_var()[ch] + mom * unbiased);
      }
    } else {
      mean = model.running_mean()[ch];
      var = model.running_var()[ch];
    }
    cache.bn_mean[ch] = static_cast<T>(mean);
    cache.bn_inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + NaiveModel<T>::kBnEps));
  }
  cache.bn_hat = Tensor<T>(Shape{n, c, h, w});
  cache.relu_out = Tensor<T>(Shape{n, c, h, w});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      auto z = cache.front_out.plane(s * c + ch);
      auto hat = cache.bn_hat.plane(s * c + ch);
      auto a = cache.relu_out.plane(s * c + ch);
      const T mu = cache.bn_mean[ch], is = cache.bn_inv_std[ch];
      for (std::size_t i = 0; i < hw; ++i) {
        hat[i] = (z[i] - mu) * is;
        a[i] = std::max(T{0}, bn_g[ch] * hat[i] + bn_b[ch]);
      }
    }
  }

  // Dense + softmax.
  const std::size_t k = model.classes(), f = model.features();
  const auto& wd = model.params()[model.dense_weight_index()].value;
  const auto& bd = model.params()[model.dense_bias_index()].value;
  cache.logits.assign(n * k, T{0});
  cache.probs.assign(n * k, T{0});
  const auto act = cache.relu_out.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* a = act.data() + s * f;
    for (std::size_t o = 0; o < k; ++o) {
      const T* row = wd.data() + o * f;
      T acc{0};
      for (std::size_t i = 0; i < f; ++i) acc += row[i] * a[i];
      cache.logits[s * k + o] = acc + bd[o];
    }
    const T* lg = cache.logits.data() + s * k;
    const T mx = *std::max_element(lg, lg + k);
    T z{0};
    for (std::size_t o = 0; o < k; ++o) {
      cache.probs[s * k + o] = std::exp(lg[o] - mx);
      z += cache.probs[s * k + o];
    }
    for (std::size_t o = 0; o < k; ++o) cache.probs[s * k + o] /= z;
  }
  return cache.logits;
}

template <typename T>
std::vector<T> forward(NaiveModel<T>& model, const Tensor<T>& batch, ForwardCache<T>& cache,
                       bool training, bool update_running) {
  forward_front(model, batch, cache);
  return forward_head(model, cache, training, update_running);
}

template <typename T>
double cross_entropy(const ForwardCache<T>& cache, std::size_t classes,
                     const std::vector<int>& labels) {
  if (labels.size() != cache.batch) {
    throw DimensionError("label count " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(cache.batch));
  }
  double total = 0.0;
  for (std::size_t s = 0; s < cache.batch; ++s) {
    const T* lg = cache.logits.data() + s * classes;
    const double mx = *std::max_element(lg, lg + classes);
    double z = 0.0;
    for (std::size_t o = 0; o < classes; ++o) z += std::exp(static_cast<double>(lg[o]) - mx);
    total += mx + std::log(z) - static_cast<double>(lg[static_cast<std::size_t>(labels[s])]);
  }
  return total / static_cast<double>(cache.batch);
}

namespace {

template <typename T>
bool uses_penalty(const NaiveModel<T>& model) {
  return model.mode() == ConstraintMode::kPenalty;
}

template <typename T>
bool is_penalised(ParamClass cls) {
  return cls == ParamClass::kFrontKernel || cls == ParamClass::kFrontGamma;
}

}  // namespace

template <typename T>
double total_loss(const NaiveModel<T>& model, const ForwardCache<T>& cache,
                  const std::vector<int>& labels, double penalty_lambda) {
  double loss = cross_entropy(cache, model.classes(), labels);
  if (uses_penalty(model) && penalty_lambda > 0.0) {
    double hinge = 0.0;
    for (const auto& p : model.params()) {
      if (!is_penalised<T>(p.cls)) continue;
      for (T v : p.value) hinge += std::max(0.0, -static_cast<double>(v));
    }
    loss += penalty_lambda * hinge;
  }
  return loss;
}

// -------------------------------------------------------------- backward

template <typename T>
void backward(NaiveModel<T>& model, const ForwardCache<T>& cache, const std::vector<int>& labels,
              double penalty_lambda) {
  const std::size_t n = cache.batch;
  if (labels.size() != n) {
    throw DimensionError("label count " + std::to_string(labels.size()) + " does not match batch " +
                         std::to_string(n));
  }
  const std::size_t c = model.channels(), h = model.height(), w = model.width(), hw = h * w;
  const std::size_t k = model.classes(), f = model.features();
  auto& params = model.params();
  for (auto& p : params) std::fill(p.grad.begin(), p.grad.end(), T{0});

  // Softmax cross-entropy.
  std::vector<T> dlogits(n * k);
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < k; ++o) {
      const T y = static_cast<std::size_t>(labels[s]) == o ? T{1} : T{0};
      dlogits[s * k + o] = (cache.probs[s * k + o] - y) * inv_n;
    }
  }

  // Dense.
  auto& wd = params[model.dense_weight_index()];
  auto& bd = params[model.dense_bias_index()];
  Tensor<T> dact(Shape{n, c, h, w});
  const auto act = cache.relu_out.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* a = act.data() + s * f;
    T* da = dact.data().data() + s * f;
    for (std::size_t o = 0; o < k; ++o) {
      const T g = dlogits[s * k + o];
      bd.grad[o] += g;
      T* gw = wd.grad.data() + o * f;
      const T* row = wd.value.data() + o * f;
      for (std::size_t i = 0; i < f; ++i) {
        gw[i] += g * a[i];
        da[i] += g * row[i];
      }
    }
  }

  // ReLU + batch norm.
  auto& bn_g = params[model.bn_gamma_index()];
  auto& bn_b = params[model.bn_beta_index()];
  Tensor<T> dz(Shape{n, c, h, w});
  const double m = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_d = 0.0, sum_dh = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      auto a = cache.relu_out.plane(s * c + ch);
      auto hat = cache.bn_hat.plane(s * c + ch);
      auto d = dact.plane(s * c + ch);
      for (std::size_t i = 0; i < hw; ++i) {
        if (!(a[i] > T{0})) d[i] = T{0};
        sum_d += d[i];
        sum_dh += static_cast<double>(d[i]) * hat[i];
      }
    }
    bn_b.grad[ch] = static_cast<T>(sum_d);
    bn_g.grad[ch] = static_cast<T>(sum_dh);
    const double g = bn_g.value[ch], is = cache.bn_inv_std[ch];
    for (std::size_t s = 0; s < n; ++s) {
      auto hat = cache.bn_hat.plane(s * c + ch);
      auto d = dact.plane(s * c + ch);
      auto out = dz.plane(s * c + ch);
      if (cache.training) {
        const double scale = g * is / m;
        for (std::size_t i = 0; i < hw; ++i) {
          out[i] = static_cast<T>(scale * (m * d[i] - sum_d - hat[i] * sum_dh));
        }
      } else {
        for (std::size_t i = 0; i < hw; ++i) out[i] = static_cast<T>(g * is * d[i]);
      }
    }
  }

  // Front: every branch receives dz at its last layer.
  const auto& front = model.front();
  for (std::size_t b = 0; b < front.branches.size(); ++b) {
    const auto& layers = front.branches[b].layers;
    Tensor<T> dy = dz;
    for (std::size_t li = layers.size(); li-- > 0;) {
      const auto& kern = layers[li].kernel;
      const auto& gam = layers[li].scale.gamma;
      const auto& ref = model.layer_ref(b, li);
      std::vector<T> dk(kern.size(), T{0});
      auto& dgamma = params[ref.gamma].grad;
      Tensor<T> din = li > 0 ? Tensor<T>(Shape{n, c, h, w}) : Tensor<T>();
      std::vector<T> ds(hw);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          auto d = dy.plane(s * c + ch);
          auto conv = cache.layer_conv[b][li].plane(s * c + ch);
          T dg{0};
          for (std::size_t i = 0; i < hw; ++i) {
            dg += d[i] * conv[i];
            ds[i] = d[i] * gam[ch];
          }
          dgamma[ch] += dg;
          auto src = li == 0 ? cache.input.plane(s)
                             : std::span<const T>(cache.layer_in[b][li].plane(s * c + ch));
          auto dkp = std::span<T>(dk).subspan(ch * kern.plane_size(), kern.plane_size());
          plane::correlate_same_kernel_grad<T>(src, ds, h, w, dkp, kern.kh(), kern.kw());
          if (li > 0) {
            plane::correlate_same_input_grad<T>(ds, h, w, kern.plane(ch), kern.kh(), kern.kw(),
                                                din.plane(s * c + ch));
          }
        }
      }
      // Chain through the kernel parameterisation.
      auto& main = params[ref.kernel];
      switch (model.mode()) {
        case ConstraintMode::kSin2:
          for (std::size_t i = 0; i < dk.size(); ++i) main.grad[i] = dk[i] * std::sin(2 * main.value[i]);
          break;
        case ConstraintMode::kSplit: {
          auto& neg = params[ref.aux];
          for (std::size_t i = 0; i < dk.size(); ++i) {
            main.grad[i] = dk[i];
            neg.grad[i] = -dk[i];
          }
          break;
        }
        default:
          main.grad = dk;
      }
      if (li > 0) dy = std::move(din);
    }
  }

  if (uses_penalty(model) && penalty_lambda > 0.0) {
    const T lam = static_cast<T>(penalty_lambda);
    for (auto& p : params) {
      if (!is_penalised<T>(p.cls)) continue;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        if (p.value[i] < T{0}) p.grad[i] -= lam;
      }
    }
  }
}

// ------------------------------------------------------------- optimiser

template <typename T>
void apply_constraint(NaiveModel<T>& model) {
  for (auto& p : model.params()) {
    bool project = false;
    switch (model.mode()) {
      case ConstraintMode::kMask:
        project = p.cls == ParamClass::kFrontKernel || p.cls == ParamClass::kFrontGamma;
        break;
      case ConstraintMode::kSplit:
        project = p.cls == ParamClass::kFrontPositive || p.cls == ParamClass::kFrontNegative;
        break;
      case ConstraintMode::kSin2:
        project = p.cls == ParamClass::kFrontGamma;
        break;
      default:
        break;
    }
    if (project) {
      for (auto& v : p.value) v = std::max(v, T{0});
    }
  }
  model.sync_front();
}

template <typename T>
void sgd_step(NaiveModel<T>& model, const TrainConfig& config) {
  const T lr = static_cast<T>(config.learning_rate);
  const T mu = static_cast<T>(config.momentum);
  for (auto& p : model.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      p.velocity[i] = mu * p.velocity[i] + p.grad[i];
      p.value[i] -= lr * p.velocity[i];
    }
  }
  apply_constraint(model);
}

template <typename T>
std::size_t negative_front_count(const NaiveModel<T>& model) {
  std::size_t count = 0;
  if (model.mode() == ConstraintMode::kSplit) {
    for (const auto& p : model.params()) {
      if (p.cls == ParamClass::kFrontPositive || p.cls == ParamClass::kFrontNegative) {
        count += static_cast<std::size_t>(std::count_if(p.value.begin(), p.value.end(),
                                                        [](T v) { return v < T{0}; }));
      }
    }
    return count;
  }
  for (const auto& br : model.front().branches) {
    for (const auto& l : br.layers) {
      for (T v : l.kernel.storage()) count += v < T{0};
      for (T v : l.scale.gamma) count += v < T{0};
    }
  }
  return count;
}

// ------------------------------------------------------------ evaluation

template <typename T>
Tensor<T> gather_batch(const LabeledDataset& data, const std::vector<std::size_t>& order,
                       std::size_t begin, std::size_t n, std::vector<int>* labels) {
  const std::size_t per = data.channels() * data.height() * data.width();
  Tensor<T> out(Shape{n, data.channels(), data.height(), data.width()});
  auto dst = out.data();
  const auto src = data.images.data();
  if (labels) labels->resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t idx = order.empty() ? begin + s : order[begin + s];
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(idx * per),
              src.begin() + static_cast<std::ptrdiff_t>((idx + 1) * per),
              dst.begin() + static_cast<std::ptrdiff_t>(s * per));
    if (labels) (*labels)[s] = data.labels[idx];
  }
  return out;
}

namespace {

std::size_t argmax(const auto* p, std::size_t k) {
  return static_cast<std::size_t>(std::max_element(p, p + k) - p);
}

}  // namespace

template <typename T>
EvalResult evaluate(NaiveModel<T>& model, const LabeledDataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw Error("evaluate: empty dataset");
  const std::size_t k = model.classes();
  EvalResult r;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  ForwardCache<T> cache;
  std::vector<int> labels;
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - begin);
    auto batch = gather_batch<T>(data, {}, begin, n, &labels);
    forward(model, batch, cache, /*training=*/false);
    loss += cross_entropy(cache, k, labels) * static_cast<double>(n);
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t pred = argmax(cache.logits.data() + s * k, k);
      const auto truth = static_cast<std::size_t>(labels[s]);
      if (truth < k) r.confusion[truth][pred] += 1;
      correct += pred == truth;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  r.loss = loss / static_cast<double>(data.size());
  return r;
}

template <typename T>
AblationResult evaluate_ablation(const NaiveModel<T>& model, const LabeledDataset& test_set,
                                 const AblationPoint& point, std::uint64_t seed,
                                 const FabricationLimits& limits) {
  const BlockSpec front = model.front_f64();
  const CompressedKernel ck = compress_block(front);
  const ModelSpec spec = make_model(front, model.height(), model.width(), model.classes());
  AblationResult res;
  res.point = point;
  const std::size_t draws = point.noise_amplitude > 0.0 ? point.draws : 1;
  double acc = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    AdaptOptions opt;
    opt.split = point.split;
    opt.bits = point.bits;
    opt.noise.amplitude = point.noise_amplitude;
    opt.noise.seed = derive_seed(derive_seed(seed, "ablation-noise"), d);
    const AdaptedKernel ak = adapt_kernel(spec, ck, opt, limits);
    const BlockSpec block = ak.split ? split_as_block(ak.as_split()) : block_from_kernel(ak.positive);
    auto m = model.with_front(block);
    acc += evaluate(m, test_set).accuracy;
    res.diagnostics = ak.diagnostics.size();
    if (ak.quant) res.quant_scale = ak.quant->scale;
    if (ak.noise) res.noise_sigma = ak.noise->sigma;
  }
  res.accuracy = acc / static_cast<double>(draws);
  return res;
}

// -------------------------------------------------------------- training

template <typename T>
TrainReport train(NaiveModel<T>& model, const LabeledDataset& train_full,
                  const LabeledDataset& test_full, const TrainConfig& config,
                  const std::string& model_name) {
  config.validate();
  if (model.mode() != config.constraint) {
    throw ValidationError(std::string("model was built for constraint '") +
                          constraint_name(model.mode()) + "' but config asks for '" +
                          constraint_name(config.constraint) + "'");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const LabeledDataset train_set =
      config.train_subset ? take(train_full, config.train_subset) : train_full;
  const LabeledDataset test_set = config.test_subset ? take(test_full, config.test_subset) : test_full;
  for (const auto* ds : {&train_set, &test_set}) {
    if (ds->channels() != 1 || ds->height() != model.height() || ds->width() != model.width()) {
      throw DimensionError("dataset images " + shape_to_string(ds->images.shape()) +
                           " do not match model input [1, " + std::to_string(model.height()) +
                           ", " + std::to_string(model.width()) + "]");
    }
  }

  TrainReport rep;
  rep.model_name = model_name;
  rep.block_hash = block_hash(model.front_f64());
  rep.config = config;
  rep.train_size = train_set.size();
  rep.test_size = test_set.size();

  ForwardCache<T> cache;
  std::vector<int> labels;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "shuffle-epoch-" + std::to_string(e)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, step = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++step) {
      const std::size_t n = std::min(config.batch_size, order.size() - begin);
      auto batch = gather_batch<T>(train_set, order, begin, n, &labels);
      forward(model, batch, cache, /*training=*/true, /*update_running=*/true);
      const double loss = total_loss(model, cache, labels, config.penalty_lambda);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("non-finite loss " + std::to_string(loss) + " at epoch " +
                               std::to_string(e) + ", step " + std::to_string(step) +
                               " (lr " + std::to_string(config.learning_rate) + ", constraint " +
                               constraint_name(config.constraint) + ")");
      }
      loss_sum += loss * static_cast<double>(n);
      for (std::size_t s = 0; s < n; ++s) {
        correct += argmax(cache.logits.data() + s * model.classes(), model.classes()) ==
                   static_cast<std::size_t>(labels[s]);
      }
      backward(model, cache, labels, config.penalty_lambda);
      sgd_step(model, config);
      // A finite loss can still be followed by an overflowing update.
      for (const auto& p : model.params()) {
        if (!std::all_of(p.value.begin(), p.value.end(), [](T v) { return std::isfinite(v); })) {
          throw TrainingDiverged("non-finite parameter after epoch " + std::to_string(e) +
                                 ", step " + std::to_string(step) + " (lr " +
                                 std::to_string(config.learning_rate) + ", constraint " +
                                 constraint_name(config.constraint) + ")");
        }
      }
    }
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (config.eval_each_epoch) rec.test_accuracy = evaluate(model, test_set).accuracy;
    rec.negative_count = negative_front_count(model);
    rep.epochs.push_back(rec);
  }
  rep.final_test_accuracy = rep.epochs.back().test_accuracy
                                ? *rep.epochs.back().test_accuracy
                                : evaluate(model, test_set).accuracy;
  {
    auto compressed = model.with_front(block_from_kernel(compress_block(model.front_f64()).kernel));
    rep.compressed_test_accuracy = evaluate(compressed, test_set).accuracy;
  }
  for (const auto& a : config.ablations) {
    rep.ablations.push_back(evaluate_ablation(model, test_set, a, config.seed));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

std::string TrainReport::to_json(bool include_timing) const {
  json j;
  j["format"] = "lkmeta-train-report";
  j["version"] = 1;
  j["model"] = model_name;
  j["block_hash"] = block_hash;
  j["config"] = config_json(config);
  j["train_size"] = train_size;
  j["test_size"] = test_size;
  j["epochs"] = json::array();
  for (const auto& e : epochs) {
    json r;
    r["epoch"] = e.epoch;
    r["train_loss"] = e.train_loss;
    r["train_accuracy"] = e.train_accuracy;
    r["test_accuracy"] = e.test_accuracy ? json(*e.test_accuracy) : json(nullptr);
    r["negative_count"] = e.negative_count;
    j["epochs"].push_back(r);
  }
  j["final_test_accuracy"] = final_test_accuracy;
  j["compressed_test_accuracy"] = compressed_test_accuracy;
  j["ablations"] = json::array();
  for (const auto& a : ablations) {
    json r = ablation_json(a.point);
    r["accuracy"] = a.accuracy;
    r["fabrication_violations"] = a.diagnostics;
    r["quant_scale"] = a.quant_scale ? json(*a.quant_scale) : json(nullptr);
    r["noise_sigma"] = a.noise_sigma ? json(*a.noise_sigma) : json(nullptr);
    j["ablations"].push_back(r);
  }
  if (include_timing) j["seconds"] = seconds;
  return j.dump(2);
}

std::string TrainReport::to_text() const {
  std::ostringstream os;
  os << "model " << model_name << " (block " << block_hash << "), constraint "
     << constraint_name(config.constraint) << ", seed " << config.seed << "\n";
  os << "sgd lr " << config.learning_rate << " momentum " << config.momentum << " batch "
     << config.batch_size << ", " << train_size << " train / " << test_size << " test images\n";
  for (const auto& e : epochs) {
    os << "epoch " << e.epoch << ": loss " << e.train_loss << " train_acc " << e.train_accuracy;
    if (e.test_accuracy) os << " test_acc " << *e.test_accuracy;
    os << " negatives " << e.negative_count << "\n";
  }
  os << "final test accuracy " << final_test_accuracy << "\n";
  os << "compressed-front test accuracy " << compressed_test_accuracy << "\n";
  for (const auto& a : ablations) {
    os << "ablation bits " << (a.point.bits ? std::to_string(*a.point.bits) : "fp")
       << " noise " << a.point.noise_amplitude << (a.point.split ? " split" : "")
       << ": accuracy " << a.accuracy << "\n";
  }
  os << "time " << seconds << " s\n";
  return os.str();
}

// -------------------------------------------------------- gradient check

std::vector<GradCheckEntry> gradient_check(NaiveModel<double>& model, const Tensor<double>& batch,
                                           const std::vector<int>& labels, double h,
                                           double penalty_lambda, std::size_t max_entries) {
  ForwardCache<double> cache;
  model.sync_front();
  forward(model, batch, cache, /*training=*/true);
  backward(model, cache, labels, penalty_lambda);
  std::vector<GradCheckEntry> out;
  std::vector<bool> active;
  for (double v : cache.relu_out.data()) active.push_back(v > 0.0);
  bool flipped = false;
  auto loss_at = [&] {
    model.sync_front();
    forward(model, batch, cache, /*training=*/true);
    const auto a = cache.relu_out.data();
    for (std::size_t i = 0; i < a.size(); ++i) flipped |= (a[i] > 0.0) != active[i];
    return total_loss(model, cache, labels, penalty_lambda);
  };
  for (auto& p : model.params()) {
    const std::vector<double> analytic = p.grad;
    const std::size_t count = p.value.size();
    const std::size_t stride = max_entries && count > max_entries ? count / max_entries : 1;
    GradCheckEntry e;
    e.param = p.name;
    e.cls = p.cls;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < count; i += stride) {
      const double saved = p.value[i];
      flipped = false;
      p.value[i] = saved + h;
      const double lp = loss_at();
      p.value[i] = saved - h;
      const double lm = loss_at();
      p.value[i] = saved;
      e.kink_crossings += flipped;
      const double numeric = (lp - lm) / (2.0 * h);
      const double d = analytic[i] - numeric;
      e.max_abs_err = std::max(e.max_abs_err, std::abs(d));
      diff2 += d * d;
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      ++e.checked;
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    e.rel_err = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    out.push_back(e);
  }
  model.sync_front();
  return out;
}

// ----------------------------------------------------------- checkpoints

template <typename T>
void save_checkpoint(const NaiveModel<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "lkmeta-checkpoint";
  j["version"] = 1;
  j["constraint"] = constraint_name(model.mode());
  j["dtype"] = dtype_name(dtype_of<T>());
  j["input"] = {{"height", model.height()}, {"width", model.width()}, {"channels", 1}};
  j["classes"] = model.classes();
  j["front"] = json::parse(block_to_json(model.front_f64()));
  j["params"] = json::array();
  auto save_vec = [&](const std::string& name, const std::vector<T>& v) {
    const std::string file = name + ".bin";
    save_tensor(dir / file, Tensor<T>(Shape{1, v.size()}, v), dtype_of<T>());
    return file;
  };
  for (const auto& p : model.params()) {
    j["params"].push_back(
        {{"name", p.name}, {"class", param_class_name(p.cls)}, {"file", save_vec(p.name, p.value)}});
  }
  j["running_mean"] = save_vec("bn.running_mean", model.running_mean());
  j["running_var"] = save_vec("bn.running_var", model.running_var());
  std::ofstream out(dir / "checkpoint.json");
  if (!out) throw IoError("cannot write " + (dir / "checkpoint.json").string());
  out << j.dump(2) << "\n";
}

NaiveModel<float> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw IoError("cannot open " + (dir / "checkpoint.json").string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError((dir / "checkpoint.json").string() + ": " + e.what());
  }
  if (j.value("format", "") != "lkmeta-checkpoint") {
    throw FormatError((dir / "checkpoint.json").string() + ": not an lkmeta checkpoint");
  }
  const BlockSpec front = parse_block(j.at("front").dump());
  const ModelSpec spec = make_model(front, j.at("input").at("height"), j.at("input").at("width"),
                                    j.at("classes"));
  NaiveModel<float> model(spec, parse_constraint(j.at("constraint")), 0);
  auto load_vec = [&](const std::string& file, std::vector<float>& dst, const std::string& what) {
    const auto t = load_tensor<float>(dir / file);
    if (t.size() != dst.size()) {
      throw FormatError(file + ": " + what + " has " + std::to_string(t.size()) +
                        " values, expected " + std::to_string(dst.size()));
    }
    dst.assign(t.data().begin(), t.data().end());
  };
  for (const auto& p : j.at("params")) {
    auto& param = model.param(p.at("name").get<std::string>());
    load_vec(p.at("file"), param.value, param.name);
  }
  load_vec(j.at("running_mean"), model.running_mean(), "running mean");
  load_vec(j.at("running_var"), model.running_var(), "running variance");
  model.sync_front();
  return model;
}

#define LKMETA_INSTANTIATE_TRAINER(T)                                                        \
  template class NaiveModel<T>;                                                              \
  template void forward_front(const NaiveModel<T>&, const Tensor<T>&, ForwardCache<T>&);    \
  template std::vector<T> forward_head(NaiveModel<T>&, ForwardCache<T>&, bool, bool);        \
  template std::vector<T> forward(NaiveModel<T>&, const Tensor<T>&, ForwardCache<T>&, bool,  \
                                  bool);                                                     \
  template double cross_entropy(const ForwardCache<T>&, std::size_t, const std::vector<int>&); \
  template double total_loss(const NaiveModel<T>&, const ForwardCache<T>&,                   \
                             const std::vector<int>&, double);                               \
  template void backward(NaiveModel<T>&, const ForwardCache<T>&, const std::vector<int>&,    \
                         double);                                                            \
  template void sgd_step(NaiveModel<T>&, const TrainConfig&);                                \
  template void apply_constraint(NaiveModel<T>&);                                            \
  template std::size_t negative_front_count(const NaiveModel<T>&);                           \
  template EvalResult evaluate(NaiveModel<T>&, const LabeledDataset&, std::size_t);          \
  template Tensor<T> gather_batch(const LabeledDataset&, const std::vector<std::size_t>&,    \
                                  std::size_t, std::size_t, std::vector<int>*);              \
  template AblationResult evaluate_ablation(const NaiveModel<T>&, const LabeledDataset&,     \
                                            const AblationPoint&, std::uint64_t,             \
                                            const FabricationLimits&);                       \
  template TrainReport train(NaiveModel<T>&, const LabeledDataset&, const LabeledDataset&,   \
                             const TrainConfig&, const std::string&);                        \
  template void save_checkpoint(const NaiveModel<T>&, const std::filesystem::path&);

LKMETA_INSTANTIATE_TRAINER(float)
LKMETA_INSTANTIATE_TRAINER(double)

#undef LKMETA_INSTANTIATE_TRAINER

}  // namespace lkmeta
