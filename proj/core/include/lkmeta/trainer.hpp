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

#ifndef LKMETA_TRAINER_HPP_
#define LKMETA_TRAINER_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lkmeta/block.hpp"
#include "lkmeta/dataset.hpp"
#include "lkmeta/error.hpp"
#include "lkmeta/optic.hpp"
#include "lkmeta/tensor.hpp"

namespace lkmeta {

// Desk-scale classifier: large-kernel front block -> batch-norm -> ReLU ->
// dense -> softmax cross-entropy, trained with momentum SGD and analytic
// gradients. Single-threaded so that seeded runs are bit-reproducible.

enum class ConstraintMode { kNone, kSin2, kMask, kPenalty, kSplit };

const char* constraint_name(ConstraintMode mode);
ConstraintMode parse_constraint(const std::string& name);

/// Evaluation of the compressed and hardware-adapted front after training.
struct AblationPoint {
  std::optional<int> bits;
  double noise_amplitude = 0.0;
  bool split = true;
  std::size_t draws = 1;  // noise realisations averaged into one accuracy
};

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t epochs = 3;
  std::uint64_t seed = 0;
  Dtype dtype = Dtype::kF32;
  ConstraintMode constraint = ConstraintMode::kNone;
  double penalty_lambda = 0.01;
  std::size_t train_subset = 10000;  // 0 keeps the whole split
  std::size_t test_subset = 0;
  bool eval_each_epoch = true;
  std::vector<AblationPoint> ablations;  // run on the final checkpoint

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

enum class ParamClass {
  kFrontKernel,
  kFrontGamma,
  kFrontTheta,     // sin2 mode: kernel = sin^2(theta)
  kFrontPositive,  // split mode: kernel = positive - negative
  kFrontNegative,
  kBnGamma,
  kBnBeta,
  kDenseWeight,
  kDenseBias,
};

const char* param_class_name(ParamClass cls);

template <typename T>
struct Param {
  std::string name;
  ParamClass cls;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> velocity;
};

/// Trainable model. The front block's layer kernels are derived from the
/// parameters according to the constraint mode (identity, sin^2 or P - N).
template <typename T>
class NaiveModel {
 public:
  NaiveModel() = default;
  NaiveModel(const ModelSpec& spec, ConstraintMode mode, std::uint64_t seed);

  ConstraintMode mode() const { return mode_; }
  std::size_t channels() const { return front_.channels; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t classes() const { return classes_; }
  std::size_t features() const { return channels() * height_ * width_; }

  /// Front block as used by the forward pass.
  const BasicBlockSpec<T>& front() const { return front_; }
  BlockSpec front_f64() const { return block_cast<double>(front_); }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }
  Param<T>& param(const std::string& name);
  const Param<T>& param(const std::string& name) const;

  const std::vector<T>& running_mean() const { return running_mean_; }
  const std::vector<T>& running_var() const { return running_var_; }
  std::vector<T>& running_mean() { return running_mean_; }
  std::vector<T>& running_var() { return running_var_; }

  /// Re-derives front kernels and scales from the parameters.
  void sync_front();

  /// Copy with the front replaced by an arbitrary block of matching channel
  /// count (for example a compressed or split kernel); BN and dense weights
  /// are kept. The copy is unconstrained.
  NaiveModel with_front(const BlockSpec& front) const;

  /// Parameter indices of one front layer. `aux` is theta (sin2) or the
  /// negative part (split); unused otherwise.
  struct LayerRef {
    std::size_t kernel = 0;
    std::size_t gamma = 0;
    std::size_t aux = 0;
  };
  const LayerRef& layer_ref(std::size_t branch, std::size_t layer) const {
    return layer_refs_.at(branch).at(layer);
  }
  std::size_t bn_gamma_index() const { return bn_gamma_; }
  std::size_t bn_beta_index() const { return bn_beta_; }
  std::size_t dense_weight_index() const { return dense_w_; }
  std::size_t dense_bias_index() const { return dense_b_; }

  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

 private:
  void init_params(const BasicBlockSpec<T>& front, std::uint64_t seed);
  std::size_t add_param(std::string name, ParamClass cls, std::vector<T> value);

  ConstraintMode mode_ = ConstraintMode::kNone;
  BasicBlockSpec<T> front_;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t classes_ = 0;
  std::vector<Param<T>> params_;
  std::vector<T> running_mean_;
  std::vector<T> running_var_;
  std::vector<std::vector<LayerRef>> layer_refs_;
  std::size_t bn_gamma_ = 0, bn_beta_ = 0, dense_w_ = 0, dense_b_ = 0;
};

/// Intermediates of one forward pass over a batch.
template <typename T>
struct ForwardCache {
  std::size_t batch = 0;
  bool training = false;
  Tensor<T> input;  // [N, 1, H, W]
  // Per branch, per layer: the layer's input and its unscaled output.
  std::vector<std::vector<Tensor<T>>> layer_in;
  std::vector<std::vector<Tensor<T>>> layer_conv;
  Tensor<T> front_out;  // [N, C, H, W]
  std::vector<T> bn_mean, bn_inv_std;
  Tensor<T> bn_hat;
  Tensor<T> relu_out;
  std::vector<T> logits;  // [N, classes]
  std::vector<T> probs;
};

/// Front block only: fills input, layer caches and front_out.
template <typename T>
void forward_front(const NaiveModel<T>& model, const Tensor<T>& batch, ForwardCache<T>& cache);

/// Head only, reading cache.front_out (batch-norm, ReLU, dense, softmax).
template <typename T>
std::vector<T> forward_head(NaiveModel<T>& model, ForwardCache<T>& cache, bool training,
                            bool update_running = false);

/// training=true uses batch statistics (and updates running statistics when
/// update_running is set); training=false uses the running statistics.
template <typename T>
std::vector<T> forward(NaiveModel<T>& model, const Tensor<T>& batch, ForwardCache<T>& cache,
                       bool training, bool update_running = false);

/// Mean softmax cross-entropy of a cached forward pass.
template <typename T>
double cross_entropy(const ForwardCache<T>& cache, std::size_t classes,
                     const std::vector<int>& labels);

/// Loss including the non-negativity penalty when the mode asks for it.
template <typename T>
double total_loss(const NaiveModel<T>& model, const ForwardCache<T>& cache,
                  const std::vector<int>& labels, double penalty_lambda);

/// Overwrites every Param::grad with d total_loss / d value.
template <typename T>
void backward(NaiveModel<T>& model, const ForwardCache<T>& cache,
              const std::vector<int>& labels, double penalty_lambda);

/// Momentum SGD (v = mu v + g; w -= lr v) followed by the constraint hook.
template <typename T>
void sgd_step(NaiveModel<T>& model, const TrainConfig& config);

/// Applies the post-step projection of the model's constraint mode.
template <typename T>
void apply_constraint(NaiveModel<T>& model);

/// Negative entries among the fabricated-side front parameters (kernels or
/// split parts, plus scales in modes that constrain them).
template <typename T>
std::size_t negative_front_count(const NaiveModel<T>& model);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

template <typename T>
EvalResult evaluate(NaiveModel<T>& model, const LabeledDataset& data, std::size_t batch_size = 256);

/// Tensor<T> slice of samples [begin, begin + n) in the given order.
template <typename T>
Tensor<T> gather_batch(const LabeledDataset& data, const std::vector<std::size_t>& order,
                       std::size_t begin, std::size_t n, std::vector<int>* labels);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
  std::size_t negative_count = 0;
};

struct AblationResult {
  AblationPoint point;
  double accuracy = 0.0;
  std::size_t diagnostics = 0;  // fabrication violations of the adapted kernel
  std::optional<double> quant_scale;
  std::optional<double> noise_sigma;
};

struct TrainReport {
  std::string model_name;
  std::string block_hash;
  TrainConfig config;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::vector<EpochRecord> epochs;
  double final_test_accuracy = 0.0;
  double compressed_test_accuracy = 0.0;
  std::vector<AblationResult> ablations;
  double seconds = 0.0;

  /// Wall-clock time is the only non-deterministic field; it is left out
  /// unless requested.
  std::string to_json(bool include_timing = false) const;
  std::string to_text() const;
};

/// Trains in place; throws TrainingDiverged on a non-finite loss.
template <typename T>
TrainReport train(NaiveModel<T>& model, const LabeledDataset& train_set,
                  const LabeledDataset& test_set, const TrainConfig& config,
                  const std::string& model_name = "model");

/// Compresses the front, adapts it and evaluates the resulting model.
template <typename T>
AblationResult evaluate_ablation(const NaiveModel<T>& model, const LabeledDataset& test_set,
                                 const AblationPoint& point, std::uint64_t seed,
                                 const FabricationLimits& limits = {});

struct GradCheckEntry {
  std::string param;
  ParamClass cls;
  double max_abs_err = 0.0;
  double rel_err = 0.0;  // ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)
  std::size_t checked = 0;
  // Probes whose +-h step flipped at least one ReLU; central differences are
  // not meaningful across a kink.
  std::size_t kink_crossings = 0;
};

/// Central differences of total_loss in training mode (batch statistics).
/// `max_entries` caps the coordinates probed per parameter (0 = all).
std::vector<GradCheckEntry> gradient_check(NaiveModel<double>& model, const Tensor<double>& batch,
                                           const std::vector<int>& labels, double h = 1e-3,
                                           double penalty_lambda = 0.0, std::size_t max_entries = 0);

/// Checkpoint: front block JSON plus one tensor file per parameter and the
/// running statistics, all in the tensor-core binary format.
template <typename T>
void save_checkpoint(const NaiveModel<T>& model, const std::filesystem::path& dir);

NaiveModel<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace lkmeta

#endif  // LKMETA_TRAINER_HPP_
