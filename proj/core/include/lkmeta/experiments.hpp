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

#ifndef LKMETA_EXPERIMENTS_HPP_
#define LKMETA_EXPERIMENTS_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "lkmeta/block.hpp"
#include "lkmeta/dataset.hpp"
#include "lkmeta/perf.hpp"
#include "lkmeta/trainer.hpp"

namespace lkmeta {

// Desk-scale experiment drivers shared by the CLI and the acceptance suite.

struct FrontPreset {
  std::string name;
  std::string label;
  std::vector<std::vector<std::size_t>> stacks;
};

/// naive3, naive7, rep753, dwc3, lmnn321 (all 12 channels in the drivers).
const std::vector<FrontPreset>& front_presets();
const FrontPreset& find_preset(const std::string& name);

inline constexpr std::size_t kPresetChannels = 12;

using Logger = std::function<void(const std::string&)>;

struct TrainedRun {
  std::string preset;
  ConstraintMode constraint = ConstraintMode::kNone;
  std::size_t seed_index = 0;
  TrainReport report;
  std::shared_ptr<NaiveModel<float>> model;
};

/// Trains each (preset, constraint, seed index) at most once.
class RunCache {
 public:
  RunCache(const FashionMnist& data, TrainConfig base, std::uint64_t root_seed, Logger log = {});

  const TrainedRun& get(const std::string& preset, ConstraintMode constraint,
                        std::size_t seed_index);

  /// Data-order seed of a seed index; shared by every preset and mode.
  std::uint64_t run_seed(std::size_t seed_index) const;
  const TrainConfig& base_config() const { return base_; }
  const FashionMnist& data() const { return data_; }

 private:
  const FashionMnist& data_;
  TrainConfig base_;
  std::uint64_t root_seed_;
  Logger log_;
  std::map<std::tuple<std::string, ConstraintMode, std::size_t>, TrainedRun> runs_;
};

/// Untrained model for a preset; the front is seeded per preset so presets
/// do not share initial weights.
NaiveModel<float> preset_model(const std::string& preset, ConstraintMode constraint,
                               std::uint64_t run_seed, std::size_t height = 28,
                               std::size_t width = 28, std::size_t classes = 10);

struct Table1Result {
  std::vector<std::string> presets;
  std::size_t seeds = 0;
  std::map<std::string, std::vector<double>> accuracy;  // per preset, per seed
  std::map<std::string, std::vector<double>> compressed_accuracy;

  double mean(const std::string& preset) const;
  std::string to_json() const;
  std::string to_text() const;
};

Table1Result run_table1(RunCache& cache, const std::vector<std::string>& presets,
                        std::size_t seeds);

struct Table2Row {
  ConstraintMode constraint = ConstraintMode::kNone;
  std::vector<double> digital;   // trained model, multi-branch front
  std::vector<double> adapted;   // split + 8-bit compressed front
  std::vector<std::size_t> negative_count;
};

struct Table2Result {
  std::string preset;
  std::vector<Table2Row> rows;
  std::string to_json() const;
  std::string to_text() const;
};

Table2Result run_table2(RunCache& cache, const std::string& preset,
                        const std::vector<ConstraintMode>& modes, std::size_t seeds);

struct Fig7Result {
  std::string preset;
  std::vector<double> noise_levels;
  std::vector<std::optional<int>> bit_levels;
  // [seed][bits][noise] accuracy
  std::vector<std::vector<std::vector<double>>> accuracy;
  double mean(std::size_t bits_index, std::size_t noise_index) const;
  std::string to_json() const;
  std::string to_text() const;
};

Fig7Result run_fig7(RunCache& cache, const std::string& preset, std::size_t seeds,
                    const std::vector<double>& noise_levels,
                    const std::vector<std::optional<int>>& bit_levels, std::size_t draws = 5);

}  // namespace lkmeta

#endif  // LKMETA_EXPERIMENTS_HPP_
