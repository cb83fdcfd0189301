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

#include "lkmeta/serialize.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lkmeta {

void Metadata::set(const std::string& key, const std::string& value) {
  if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw Error("metadata key/value may not contain '=' or newlines: " + key);
  }
  entries_[key] = value;
}

void Metadata::set(const std::string& key, double value) { set(key, format_exact(value)); }

std::optional<std::string> Metadata::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string Metadata::require(const std::string& key) const {
  auto v = get(key);
  if (!v) throw FormatError("metadata is missing key '" + key + "'");
  return *v;
}

std::string Metadata::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
  return os.str();
}

Metadata Metadata::parse(const std::string& text) {
  Metadata m;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("metadata line " + std::to_string(lineno) + " has no '='");
    }
    m.entries_[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

std::filesystem::path metadata_path(const std::filesystem::path& bin_path) {
  return std::filesystem::path(bin_path.string() + ".meta");
}

Metadata read_metadata(const std::filesystem::path& bin_path) {
  std::ifstream in(metadata_path(bin_path));
  if (!in) throw IoError("cannot open metadata " + metadata_path(bin_path).string());
  std::stringstream ss;
  ss << in.rdbuf();
  return Metadata::parse(ss.str());
}

std::string format_exact(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

std::string join_shape(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(shape[i]);
  }
  return s;
}

Shape split_shape(const std::string& text) {
  Shape shape;
  std::istringstream is(text);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    std::size_t v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
      throw FormatError("bad shape entry '" + tok + "'");
    }
    shape.push_back(v);
  }
  if (shape.empty()) throw FormatError("empty shape in metadata");
  return shape;
}

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits b;
    std::memcpy(&b, &v, sizeof(U));
    Bits r = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      r = (r << 8) | (b & 0xFF);
      b >>= 8;
    }
    std::memcpy(&v, &r, sizeof(U));
    return v;
  }
}

template <typename T>
void write_values(const std::filesystem::path& path, std::span<const T> values, Dtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  auto emit = [&](auto tag) {
    using U = decltype(tag);
    std::vector<U> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) buf[i] = to_little(static_cast<U>(values[i]));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(U)));
  };
  if (dtype == Dtype::kF32) emit(float{}); else emit(double{});
  if (!out) throw IoError("short write to " + path.string());
}

template <typename T>
std::vector<T> read_values(const std::filesystem::path& path, std::size_t count, Dtype dtype) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto take = [&](auto tag) {
    using U = decltype(tag);
    std::vector<U> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(U)));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got != count * sizeof(U)) {
      throw FormatError(path.string() + ": truncated at byte offset " + std::to_string(got) +
                        ", expected " + std::to_string(count * sizeof(U)) + " bytes");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
      throw FormatError(path.string() + ": trailing bytes after offset " +
                        std::to_string(count * sizeof(U)));
    }
    std::vector<T> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<T>(to_little(buf[i]));
    return values;
  };
  return dtype == Dtype::kF32 ? take(float{}) : take(double{});
}

void write_metadata(const std::filesystem::path& bin_path, const Metadata& meta) {
  std::ofstream out(metadata_path(bin_path));
  if (!out) throw IoError("cannot write " + metadata_path(bin_path).string());
  out << meta.to_text();
}

}  // namespace

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t, Dtype dtype,
                 const Metadata& extra) {
  Metadata meta = extra;
  meta.set("format", std::string("lkmeta-tensor"));
  meta.set("version", std::string("1"));
  meta.set("kind", std::string("tensor"));
  meta.set("dtype", std::string(dtype_name(dtype)));
  meta.set("shape", join_shape(t.shape()));
  write_values<T>(path, t.data(), dtype);
  write_metadata(path, meta);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  const Metadata meta = read_metadata(path);
  const Shape shape = split_shape(meta.require("shape"));
  const Dtype dtype = parse_dtype(meta.require("dtype"));
  return Tensor<T>(shape, read_values<T>(path, shape_numel(shape), dtype));
}

template <typename T>
void save_kernel(const std::filesystem::path& path, const Kernel<T>& k, Dtype dtype,
                 const Metadata& extra) {
  Metadata meta = extra;
  meta.set("format", std::string("lkmeta-tensor"));
  meta.set("version", std::string("1"));
  meta.set("kind", std::string("kernel"));
  meta.set("layout", std::string(layout_name(k.layout())));
  meta.set("dtype", std::string(dtype_name(dtype)));
  meta.set("shape", join_shape(k.shape()));
  write_values<T>(path, k.weights(), dtype);
  write_metadata(path, meta);
}

template <typename T>
Kernel<T> load_kernel(const std::filesystem::path& path, Metadata* meta_out) {
  const Metadata meta = read_metadata(path);
  const Shape shape = split_shape(meta.require("shape"));
  const Dtype dtype = parse_dtype(meta.require("dtype"));
  const std::string layout = meta.require("layout");
  auto values = read_values<T>(path, shape_numel(shape), dtype);
  if (meta_out) *meta_out = meta;
  if (layout == "depthwise") {
    if (shape.size() != 3) throw FormatError("depthwise kernel shape must have 3 axes");
    return Kernel<T>::depthwise(shape[0], shape[1], shape[2], std::move(values));
  }
  if (layout == "dense") {
    if (shape.size() != 4) throw FormatError("dense kernel shape must have 4 axes");
    return Kernel<T>::dense(shape[0], shape[1], shape[2], shape[3], std::move(values));
  }
  throw FormatError("unknown kernel layout '" + layout + "'");
}

#define LKMETA_INSTANTIATE_IO(T)                                                          \
  template void save_tensor(const std::filesystem::path&, const Tensor<T>&, Dtype,        \
                            const Metadata&);                                             \
  template Tensor<T> load_tensor(const std::filesystem::path&);                           \
  template void save_kernel(const std::filesystem::path&, const Kernel<T>&, Dtype,        \
                            const Metadata&);                                             \
  template Kernel<T> load_kernel(const std::filesystem::path&, Metadata*);

LKMETA_INSTANTIATE_IO(float)
LKMETA_INSTANTIATE_IO(double)

#undef LKMETA_INSTANTIATE_IO

}  // namespace lkmeta
