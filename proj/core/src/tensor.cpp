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

#include <sstream>

#include "lkmeta/tensor.hpp"

namespace lkmeta {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(Dtype dtype) { return dtype == Dtype::kF32 ? "f32" : "f64"; }

Dtype parse_dtype(const std::string& name) {
  if (name == "f32" || name == "float32") return Dtype::kF32;
  if (name == "f64" || name == "float64") return Dtype::kF64;
  throw Error("unknown dtype '" + name + "' (expected f32 or f64)");
}

const char* layout_name(KernelLayout layout) {
  return layout == KernelLayout::kDepthwise ? "depthwise" : "dense";
}

}  // namespace lkmeta
