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

#ifndef LKMETA_SERIALIZE_HPP_
#define LKMETA_SERIALIZE_HPP_

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "lkmeta/tensor.hpp"

namespace lkmeta {

// On-disk layout: `<name>.bin` holds raw little-endian reals (32-bit unless
// the sidecar says f64); `<name>.bin.meta` is a `key=value` text file with
// at least `kind`, `dtype`, `shape` and, for kernels, `layout`.

class Metadata {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  std::optional<std::string> get(const std::string& key) const;
  std::string require(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

  std::string to_text() const;
  static Metadata parse(const std::string& text);

 private:
  std::map<std::string, std::string> entries_;
};

std::filesystem::path metadata_path(const std::filesystem::path& bin_path);
Metadata read_metadata(const std::filesystem::path& bin_path);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t,
                 Dtype dtype = Dtype::kF32, const Metadata& extra = {});

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

template <typename T>
void save_kernel(const std::filesystem::path& path, const Kernel<T>& k,
                 Dtype dtype = Dtype::kF32, const Metadata& extra = {});

template <typename T>
Kernel<T> load_kernel(const std::filesystem::path& path, Metadata* meta = nullptr);

/// Shortest decimal text that parses back to the same float (or double).
std::string format_exact(float v);
std::string format_exact(double v);

}  // namespace lkmeta

#endif  // LKMETA_SERIALIZE_HPP_
