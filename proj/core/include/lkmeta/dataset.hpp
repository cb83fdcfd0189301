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

#ifndef LKMETA_DATASET_HPP_
#define LKMETA_DATASET_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lkmeta/tensor.hpp"

namespace lkmeta {

enum class Split { kTrain, kTest };

const char* split_name(Split split);

/// Images are [N, C, H, W] with pixels in [0, 1]; labels are 0-based.
struct LabeledDataset {
  Tensor<float> images;
  std::vector<int> labels;
  Split split = Split::kTrain;
  std::size_t classes = 10;
  std::map<std::string, std::string> info;  // provenance, e.g. luma weights

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
};

/// IDX image/label pair (magic 0x00000803 / 0x00000801, big-endian header,
/// unsigned-byte payload). gzip-compressed files are detected and inflated.
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, Split split = Split::kTrain);

/// Writes a single-channel dataset back as IDX (pixels rounded to bytes).
void save_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
              const LabeledDataset& dataset, bool gzip = false);

inline constexpr std::size_t kStl10Side = 96;

/// STL-10 binary split: 3 x 96 x 96 bytes per image, each channel stored
/// column-major, channels R, G, B; labels are 1-based bytes. Returns RGB.
LabeledDataset load_stl10(const std::filesystem::path& binary_path,
                          const std::filesystem::path& labels_path, Split split = Split::kTrain);

struct LumaWeights {
  double r = 0.299;
  double g = 0.587;
  double b = 0.114;
};

/// [N, 3, H, W] or [3, H, W] -> single channel, y = r R + g G + b B.
Tensor<float> to_grayscale(const Tensor<float>& rgb, const LumaWeights& luma = {});
LabeledDataset to_grayscale(const LabeledDataset& rgb, const LumaWeights& luma = {});

struct SynthSpec {
  std::size_t classes = 2;
  std::size_t per_class = 100;
  std::size_t height = 28;
  std::size_t width = 28;
  std::uint64_t seed = 0;
  double noise = 0.05;
};

/// Gaussian-blob toy set: class c places a blob at its own position on a
/// ring around the image center. Labels are balanced and interleaved.
LabeledDataset synth_dataset(const SynthSpec& spec);

/// First `n` samples (all of them when n >= size()).
LabeledDataset take(const LabeledDataset& dataset, std::size_t n);

struct ManifestEntry {
  std::string path;
  std::string sha256;
};

struct DatasetManifest {
  std::string name;
  std::vector<ManifestEntry> files;
};

DatasetManifest load_manifest(const std::filesystem::path& path);

/// Throws IoError listing the first file whose checksum does not match.
void verify_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir);

std::string sha256_file(const std::filesystem::path& path);

struct FashionMnist {
  LabeledDataset train;
  LabeledDataset test;
};

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`,
/// checking `manifest.json` when one is present.
FashionMnist load_fashion_mnist(const std::filesystem::path& dir);

bool fashion_mnist_available(const std::filesystem::path& dir);

}  // namespace lkmeta

#endif  // LKMETA_DATASET_HPP_
