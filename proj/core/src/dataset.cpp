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

#include "lkmeta/dataset.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"
#include "lkmeta/random.hpp"

namespace lkmeta {

const char* split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Whole-file read; gzread passes uncompressed files through unchanged.
std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  std::unique_ptr<gzFile_s, int (*)(gzFile)> f(gzopen(path.string().c_str(), "rb"), gzclose);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(f.get(), buf, sizeof(buf));
    if (n < 0) {
      int err = 0;
      const char* msg = gzerror(f.get(), &err);
      throw FormatError(path.string() + ": decompression failed at byte offset " +
                        std::to_string(out.size()) + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  // A truncated gzip stream reads short without an error code from gzread on
  // some zlib versions; gzclose_r reports it.
  int err = 0;
  gzerror(f.get(), &err);
  if (err != Z_OK && err != Z_STREAM_END) {
    throw FormatError(path.string() + ": corrupt gzip stream near byte offset " +
                      std::to_string(out.size()));
  }
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off,
                   const std::filesystem::path& path) {
  if (off + 4 > b.size()) {
    throw FormatError(path.string() + ": truncated header at byte offset " + std::to_string(off));
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes, bool gz) {
  if (gz) {
    std::unique_ptr<gzFile_s, int (*)(gzFile)> f(gzopen(path.string().c_str(), "wb"), gzclose);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    if (gzwrite(f.get(), bytes.data(), static_cast<unsigned>(bytes.size())) !=
        static_cast<int>(bytes.size())) {
      throw IoError("short write to " + path.string());
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, Split split) {
  const auto img = read_maybe_gzip(images_path);
  const auto lbl = read_maybe_gzip(labels_path);

  if (be32(img, 0, images_path) != kIdxImagesMagic) {
    throw FormatError(images_path.string() + ": bad magic at byte offset 0 (expected 0x00000803)");
  }
  const std::size_t n = be32(img, 4, images_path);
  const std::size_t h = be32(img, 8, images_path);
  const std::size_t w = be32(img, 12, images_path);
  if (n == 0 || h == 0 || w == 0) {
    throw FormatError(images_path.string() + ": zero extent in header at byte offset 4");
  }
  const std::size_t need = 16 + n * h * w;
  if (img.size() < need) {
    throw FormatError(images_path.string() + ": truncated at byte offset " +
                      std::to_string(img.size()) + ", expected " + std::to_string(need) + " bytes");
  }
  if (be32(lbl, 0, labels_path) != kIdxLabelsMagic) {
    throw FormatError(labels_path.string() + ": bad magic at byte offset 0 (expected 0x00000801)");
  }
  const std::size_t nl = be32(lbl, 4, labels_path);
  if (nl != n) {
    throw FormatError(labels_path.string() + ": label count " + std::to_string(nl) +
                      " at byte offset 4 does not match image count " + std::to_string(n));
  }
  if (lbl.size() < 8 + n) {
    throw FormatError(labels_path.string() + ": truncated at byte offset " +
                      std::to_string(lbl.size()) + ", expected " + std::to_string(8 + n) + " bytes");
  }

  LabeledDataset ds;
  ds.split = split;
  ds.images = Tensor<float>(Shape{n, 1, h, w});
  auto px = ds.images.data();
  for (std::size_t i = 0; i < n * h * w; ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lbl[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  ds.info["source"] = images_path.filename().string();
  ds.info["normalization"] = "bytes/255";
  return ds;
}

void save_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
              const LabeledDataset& dataset, bool gzip) {
  if (dataset.channels() != 1) throw DimensionError("channel axis: IDX stores one channel");
  std::vector<std::uint8_t> img;
  put_be32(img, kIdxImagesMagic);
  put_be32(img, static_cast<std::uint32_t>(dataset.size()));
  put_be32(img, static_cast<std::uint32_t>(dataset.height()));
  put_be32(img, static_cast<std::uint32_t>(dataset.width()));
  for (float v : dataset.images.data()) {
    img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  std::vector<std::uint8_t> lbl;
  put_be32(lbl, kIdxLabelsMagic);
  put_be32(lbl, static_cast<std::uint32_t>(dataset.size()));
  for (int l : dataset.labels) lbl.push_back(static_cast<std::uint8_t>(l));
  write_bytes(images_path, img, gzip);
  write_bytes(labels_path, lbl, gzip);
}

LabeledDataset load_stl10(const std::filesystem::path& binary_path,
                          const std::filesystem::path& labels_path, Split split) {
  constexpr std::size_t side = kStl10Side;
  constexpr std::size_t plane = side * side;
  constexpr std::size_t record = 3 * plane;
  const auto img = read_raw(binary_path);
  if (img.empty() || img.size() % record != 0) {
    throw FormatError(binary_path.string() + ": size " + std::to_string(img.size()) +
                      " is not a multiple of the " + std::to_string(record) +
                      "-byte record; last full record ends at byte offset " +
                      std::to_string(img.size() / record * record));
  }
  const std::size_t n = img.size() / record;
  const auto lbl = read_raw(labels_path);
  if (lbl.size() != n) {
    throw FormatError(labels_path.string() + ": " + std::to_string(lbl.size()) + " labels for " +
                      std::to_string(n) + " images (truncated at byte offset " +
                      std::to_string(std::min(lbl.size(), n)) + ")");
  }
  LabeledDataset ds;
  ds.split = split;
  ds.images = Tensor<float>(Shape{n, 3, side, side});
  auto px = ds.images.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::uint8_t* src = img.data() + s * record + c * plane;
      float* dst = px.data() + s * record + c * plane;
      // Column-major on disk: byte (col * side + row) holds pixel (row, col).
      for (std::size_t col = 0; col < side; ++col) {
        for (std::size_t row = 0; row < side; ++row) {
          dst[row * side + col] = static_cast<float>(src[col * side + row]) / 255.0f;
        }
      }
    }
  }
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lbl[i] < 1 || lbl[i] > 10) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(lbl[i]) +
                        " out of range 1..10 at byte offset " + std::to_string(i));
    }
    ds.labels[i] = lbl[i] - 1;
  }
  ds.classes = 10;
  ds.info["source"] = binary_path.filename().string();
  ds.info["normalization"] = "bytes/255";
  return ds;
}

Tensor<float> to_grayscale(const Tensor<float>& rgb, const LumaWeights& luma) {
  if (rgb.rank() != 3 && rgb.rank() != 4) {
    throw DimensionError("grayscale input must be [3, H, W] or [N, 3, H, W]");
  }
  if (rgb.channels() != 3) {
    throw DimensionError("channel axis: grayscale conversion needs 3 channels, got " +
                         std::to_string(rgb.channels()));
  }
  const std::size_t n = rgb.rank() == 4 ? rgb.dim(0) : 1;
  const std::size_t hw = rgb.height() * rgb.width();
  Shape shape = rgb.shape();
  shape[shape.size() - 3] = 1;
  Tensor<float> out(shape);
  const auto r = static_cast<float>(luma.r), g = static_cast<float>(luma.g),
             b = static_cast<float>(luma.b);
  for (std::size_t s = 0; s < n; ++s) {
    auto R = rgb.plane(3 * s), G = rgb.plane(3 * s + 1), B = rgb.plane(3 * s + 2);
    auto Y = out.plane(s);
    for (std::size_t i = 0; i < hw; ++i) Y[i] = r * R[i] + g * G[i] + b * B[i];
  }
  return out;
}

LabeledDataset to_grayscale(const LabeledDataset& rgb, const LumaWeights& luma) {
  LabeledDataset out;
  out.images = to_grayscale(rgb.images, luma);
  out.labels = rgb.labels;
  out.split = rgb.split;
  out.classes = rgb.classes;
  out.info = rgb.info;
  std::ostringstream os;
  os << luma.r << ',' << luma.g << ',' << luma.b;
  out.info["luma_weights"] = os.str();
  return out;
}

LabeledDataset synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2) throw Error("synth_dataset: need at least 2 classes");
  const std::size_t n = spec.classes * spec.per_class;
  LabeledDataset ds;
  ds.classes = spec.classes;
  ds.images = Tensor<float>(Shape{n, 1, spec.height, spec.width});
  ds.labels.resize(n);
  Rng rng(derive_seed(spec.seed, "synth-dataset"));
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  std::normal_distribution<double> pixel_noise(0.0, spec.noise);
  const double cy = (static_cast<double>(spec.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(spec.width) - 1.0) / 2.0;
  const double ring = 0.3 * static_cast<double>(std::min(spec.height, spec.width));
  const double sigma = 0.12 * static_cast<double>(std::min(spec.height, spec.width));
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t c = s % spec.classes;
    ds.labels[s] = static_cast<int>(c);
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) /
                         static_cast<double>(spec.classes);
    const double by = cy + ring * std::sin(angle) + jitter(rng);
    const double bx = cx + ring * std::cos(angle) + jitter(rng);
    auto img = ds.images.plane(s);
    for (std::size_t i = 0; i < spec.height; ++i) {
      for (std::size_t j = 0; j < spec.width; ++j) {
        const double dy = static_cast<double>(i) - by;
        const double dx = static_cast<double>(j) - bx;
        const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma)) + pixel_noise(rng);
        img[i * spec.width + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  ds.info["source"] = "synthetic-gaussian-blobs";
  return ds;
}

LabeledDataset take(const LabeledDataset& dataset, std::size_t n) {
  if (n >= dataset.size()) return dataset;
  if (n == 0) throw Error("take: need at least one sample");
  LabeledDataset out;
  Shape shape = dataset.images.shape();
  shape[0] = n;
  const std::size_t per = dataset.images.size() / dataset.size();
  out.images = Tensor<float>(shape, std::vector<float>(dataset.images.data().begin(),
                                                       dataset.images.data().begin() +
                                                           static_cast<std::ptrdiff_t>(n * per)));
  out.labels.assign(dataset.labels.begin(), dataset.labels.begin() + static_cast<std::ptrdiff_t>(n));
  out.split = dataset.split;
  out.classes = dataset.classes;
  out.info = dataset.info;
  out.info["subset"] = std::to_string(n);
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.name = j.value("dataset", "");
  if (!j.contains("files") || !j.at("files").is_array()) {
    throw ParseError(path.string() + ": $.files must be an array");
  }
  for (const auto& f : j.at("files")) m.files.push_back({f.at("path"), f.at("sha256")});
  return m;
}

void verify_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir) {
  for (const auto& f : manifest.files) {
    const auto path = base_dir / f.path;
    if (!std::filesystem::exists(path)) throw IoError("manifest file missing: " + path.string());
    const std::string got = sha256_file(path);
    if (got != f.sha256) {
      throw IoError("checksum mismatch for " + path.string() + ": expected " + f.sha256 +
                    ", got " + got);
    }
  }
}

namespace {

std::filesystem::path pick(const std::filesystem::path& dir, const std::string& stem) {
  const auto gz = dir / (stem + ".gz");
  if (std::filesystem::exists(gz)) return gz;
  return dir / stem;
}

}  // namespace

bool fashion_mnist_available(const std::filesystem::path& dir) {
  for (const char* stem : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                           "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
    if (!std::filesystem::exists(pick(dir, stem))) return false;
  }
  return true;
}

FashionMnist load_fashion_mnist(const std::filesystem::path& dir) {
  if (!fashion_mnist_available(dir)) {
    throw IoError("FashionMNIST IDX files not found in " + dir.string());
  }
  if (std::filesystem::exists(dir / "manifest.json")) {
    verify_manifest(load_manifest(dir / "manifest.json"), dir);
  }
  FashionMnist fm;
  fm.train = load_idx(pick(dir, "train-images-idx3-ubyte"), pick(dir, "train-labels-idx1-ubyte"),
                      Split::kTrain);
  fm.test = load_idx(pick(dir, "t10k-images-idx3-ubyte"), pick(dir, "t10k-labels-idx1-ubyte"),
                     Split::kTest);
  return fm;
}

}  // namespace lkmeta
