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

#include "lkmeta/experiments.hpp"

#include <numeric>
#include <sstream>

#include "json.hpp"
#include "lkmeta/random.hpp"

namespace lkmeta {

using nlohmann::json;

const std::vector<FrontPreset>& front_presets() {
  static const std::vector<FrontPreset> presets{
      {"naive3", "3x3 naive", {{3}}},
      {"naive7", "7x7 naive", {{7}}},
      {"rep753", "7+5+3 re-param", {{7}, {5}, {3}}},
      {"dwc3", "3 dwc stack", {{3, 3, 3}}},
      {"lmnn321", "3+2+1 dwc (LMNN)", {{3, 3, 3}, {3, 3}, {3}}},
  };
  return presets;
}

const FrontPreset& find_preset(const std::string& name) {
  for (const auto& p : front_presets()) {
    if (p.name == name) return p;
  }
  std::string names;
  for (const auto& p : front_presets()) names += (names.empty() ? "" : ", ") + p.name;
  throw ValidationError("unknown front preset '" + name + "' (available: " + names + ")");
}

NaiveModel<float> preset_model(const std::string& preset, ConstraintMode constraint,
                               std::uint64_t run_seed, std::size_t height, std::size_t width,
                               std::size_t classes) {
  const auto& p = find_preset(preset);
  const std::uint64_t seed = derive_seed(run_seed, "preset-" + p.name);
  BlockSpec front = make_block(kPresetChannels, p.stacks, derive_seed(seed, "front"));
  return NaiveModel<float>(make_model(std::move(front), height, width, classes), constraint,
                           derive_seed(seed, "head"));
}

RunCache::RunCache(const FashionMnist& data, TrainConfig base, std::uint64_t root_seed, Logger log)
    : data_(data), base_(std::move(base)), root_seed_(root_seed), log_(std::move(log)) {
  base_.validate();
}

std::uint64_t RunCache::run_seed(std::size_t seed_index) const {
  return derive_seed(root_seed_, "run-" + std::to_string(seed_index));
}

const TrainedRun& RunCache::get(const std::string& preset, ConstraintMode constraint,
                                std::size_t seed_index) {
  const auto key = std::make_tuple(preset, constraint, seed_index);
  if (auto it = runs_.find(key); it != runs_.end()) return it->second;
  TrainConfig cfg = base_;
  cfg.seed = run_seed(seed_index);
  cfg.constraint = constraint;
  auto model = std::make_shared<NaiveModel<float>>(
      preset_model(preset, constraint, cfg.seed, data_.train.height(), data_.train.width(),
                   data_.train.classes));
  TrainedRun run;
  run.preset = preset;
  run.constraint = constraint;
  run.seed_index = seed_index;
  run.report = train(*model, data_.train, data_.test, cfg, preset);
  run.model = std::move(model);
  if (log_) {
    std::ostringstream os;
    os << preset << " [" << constraint_name(constraint) << "] seed " << seed_index << ": test acc "
       << run.report.final_test_accuracy << " (" << run.report.seconds << " s)";
    log_(os.str());
  }
  return runs_.emplace(key, std::move(run)).first->second;
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double Table1Result::mean(const std::string& preset) const { return mean_of(accuracy.at(preset)); }

Table1Result run_table1(RunCache& cache, const std::vector<std::string>& presets,
                        std::size_t seeds) {
  Table1Result r;
  r.presets = presets;
  r.seeds = seeds;
  for (const auto& p : presets) {
    find_preset(p);
    for (std::size_t s = 0; s < seeds; ++s) {
      const auto& run = cache.get(p, ConstraintMode::kNone, s);
      r.accuracy[p].push_back(run.report.final_test_accuracy);
      r.compressed_accuracy[p].push_back(run.report.compressed_test_accuracy);
    }
  }
  return r;
}

std::string Table1Result::to_json() const {
  json j;
  j["experiment"] = "table1-fmnist";
  j["seeds"] = seeds;
  j["rows"] = json::array();
  for (const auto& p : presets) {
    j["rows"].push_back({{"preset", p},
                         {"label", find_preset(p).label},
                         {"accuracy", accuracy.at(p)},
                         {"compressed_accuracy", compressed_accuracy.at(p)},
                         {"mean", mean(p)}});
  }
  return j.dump(2);
}

std::string Table1Result::to_text() const {
  std::ostringstream os;
  os << "preset              mean     per-seed\n";
  for (const auto& p : presets) {
    os << find_preset(p).label;
    for (std::size_t i = find_preset(p).label.size(); i < 20; ++i) os << ' ';
    os << mean(p) << "  ";
    for (double a : accuracy.at(p)) os << ' ' << a;
    os << '\n';
  }
  return os.str();
}

Table2Result run_table2(RunCache& cache, const std::string& preset,
                        const std::vector<ConstraintMode>& modes, std::size_t seeds) {
  Table2Result r;
  r.preset = preset;
  AblationPoint adapted;
  adapted.bits = 8;
  adapted.split = true;
  for (auto m : modes) {
    Table2Row row;
    row.constraint = m;
    for (std::size_t s = 0; s < seeds; ++s) {
      const auto& run = cache.get(preset, m, s);
      row.digital.push_back(run.report.final_test_accuracy);
      row.adapted.push_back(
          evaluate_ablation(*run.model, cache.data().test, adapted, run.report.config.seed).accuracy);
      row.negative_count.push_back(run.report.epochs.back().negative_count);
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::string Table2Result::to_json() const {
  json j;
  j["experiment"] = "table2-adapt";
  j["preset"] = preset;
  j["rows"] = json::array();
  for (const auto& row : rows) {
    j["rows"].push_back({{"constraint", constraint_name(row.constraint)},
                         {"digital", row.digital},
                         {"adapted", row.adapted},
                         {"digital_mean", mean_of(row.digital)},
                         {"adapted_mean", mean_of(row.adapted)},
                         {"negative_count", row.negative_count}});
  }
  return j.dump(2);
}

std::string Table2Result::to_text() const {
  std::ostringstream os;
  os << "constraint  digital  adapted(split, 8-bit)\n";
  for (const auto& row : rows) {
    std::string n = constraint_name(row.constraint);
    n.resize(12, ' ');
    os << n << mean_of(row.digital) << "  " << mean_of(row.adapted) << '\n';
  }
  return os.str();
}

double Fig7Result::mean(std::size_t b, std::size_t n) const {
  double s = 0.0;
  for (const auto& per_seed : accuracy) s += per_seed[b][n];
  return accuracy.empty() ? 0.0 : s / static_cast<double>(accuracy.size());
}

Fig7Result run_fig7(RunCache& cache, const std::string& preset, std::size_t seeds,
                    const std::vector<double>& noise_levels,
                    const std::vector<std::optional<int>>& bit_levels, std::size_t draws) {
  Fig7Result r;
  r.preset = preset;
  r.noise_levels = noise_levels;
  r.bit_levels = bit_levels;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto& run = cache.get(preset, ConstraintMode::kNone, s);
    std::vector<std::vector<double>> grid;
    for (const auto& bits : bit_levels) {
      std::vector<double> row;
      for (double noise : noise_levels) {
        AblationPoint p;
        p.bits = bits;
        p.noise_amplitude = noise;
        p.split = true;
        p.draws = draws;
        row.push_back(
            evaluate_ablation(*run.model, cache.data().test, p, run.report.config.seed).accuracy);
      }
      grid.push_back(std::move(row));
    }
    r.accuracy.push_back(std::move(grid));
  }
  return r;
}

std::string Fig7Result::to_json() const {
  json j;
  j["experiment"] = "fig7-ablations";
  j["preset"] = preset;
  j["noise_levels"] = noise_levels;
  j["bits"] = json::array();
  for (const auto& b : bit_levels) j["bits"].push_back(b ? json(*b) : json(32));
  j["accuracy"] = accuracy;
  json means = json::array();
  for (std::size_t b = 0; b < bit_levels.size(); ++b) {
    json row = json::array();
    for (std::size_t n = 0; n < noise_levels.size(); ++n) row.push_back(mean(b, n));
    means.push_back(row);
  }
  j["mean"] = means;
  return j.dump(2);
}

std::string Fig7Result::to_text() const {
  std::ostringstream os;
  os << "bits \\ noise";
  for (double n : noise_levels) os << "  " << n;
  os << '\n';
  for (std::size_t b = 0; b < bit_levels.size(); ++b) {
    os << (bit_levels[b] ? std::to_string(*bit_levels[b]) : std::string("32")) << "          ";
    for (std::size_t n = 0; n < noise_levels.size(); ++n) os << "  " << mean(b, n);
    os << '\n';
  }
  return os.str();
}

}  // namespace lkmeta
