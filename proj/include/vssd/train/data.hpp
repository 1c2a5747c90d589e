#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vssd/core/rng.hpp"
#include "vssd/core/tensor.hpp"

namespace vssd::train {

/// Images stored as raw bytes, CHW per example; standardized on batch fetch.
struct Dataset {
  std::size_t count = 0, channels = 3, height = 32, width = 32, classes = 10;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};  // CIFAR-10 training-set channel statistics
  std::array<double, 3> std{0.2470, 0.2435, 0.2616};

  std::size_t image_bytes() const { return channels * height * width; }

  void validate() const {
    if (pixels.size() != count * image_bytes() || labels.size() != count) {
      throw FormatError("dataset: storage does not match " + std::to_string(count) + " examples");
    }
    if (channels > 3) throw ConfigError("dataset: at most 3 channels are supported");
    for (auto l : labels)
      if (l >= classes) throw ValidationError("dataset: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
  }

  /// Standardized [B, C, H, W] batch; flip[i] mirrors example i horizontally.
  template <Real T>
  Tensor<T> images(const std::vector<std::size_t>& idx, const std::vector<bool>& flip = {}) const {
    Tensor<T> out({idx.size(), channels, height, width});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (idx[b] >= count) throw DimensionError("dataset: index " + std::to_string(idx[b]) + " out of range");
      const std::uint8_t* src = pixels.data() + idx[b] * image_bytes();
      const bool f = !flip.empty() && flip[b];
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < height; ++y)
          for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sx = f ? width - 1 - x : x;
            const double v = double(src[(c * height + y) * width + sx]) / 255.0;
            out[((b * channels + c) * height + y) * width + x] = T((v - mean[c]) / std[c]);
          }
    }
    return out;
  }

  std::vector<std::size_t> labels_of(const std::vector<std::size_t>& idx) const {
    std::vector<std::size_t> l;
    l.reserve(idx.size());
    for (auto i : idx) l.push_back(labels.at(i));
    return l;
  }

  /// The record layout of the CIFAR-10 binary format: label byte then pixels.
  std::vector<std::uint8_t> encode_record(std::size_t i) const {
    std::vector<std::uint8_t> r{labels.at(i)};
    r.insert(r.end(), pixels.begin() + i * image_bytes(), pixels.begin() + (i + 1) * image_bytes());
    return r;
  }
};

struct TrainVal {
  Dataset train, val;
};

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

/// Reads data_batch_1..5.bin and test_batch.bin. Each file must hold exactly
/// records_per_file records.
inline TrainVal load_cifar10_binary(const std::filesystem::path& dir, std::size_t records_per_file = 10000) {
  auto read = [&](const std::string& name, Dataset& ds) {
    const auto path = dir / name;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cifar10: cannot open " + path.string());
    std::vector<char> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    const std::size_t expected = records_per_file * kCifarRecord;
    if (bytes.size() != expected) {
      throw FormatError("cifar10: " + path.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(expected));
    }
    for (std::size_t r = 0; r < records_per_file; ++r) {
      const auto* rec = reinterpret_cast<const std::uint8_t*>(bytes.data()) + r * kCifarRecord;
      if (rec[0] > 9) throw FormatError("cifar10: label byte " + std::to_string(rec[0]) + " in " + path.string());
      ds.labels.push_back(rec[0]);
      ds.pixels.insert(ds.pixels.end(), rec + 1, rec + kCifarRecord);
      ++ds.count;
    }
  };
  TrainVal tv;
  for (int i = 1; i <= 5; ++i) read("data_batch_" + std::to_string(i) + ".bin", tv.train);
  read("test_batch.bin", tv.val);
  tv.train.validate();
  tv.val.validate();
  return tv;
}

/// Writes examples [first, first + n) in the CIFAR-10 binary layout.
inline void write_cifar10_file(const std::filesystem::path& path, const Dataset& ds, std::size_t first, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cifar10: cannot write " + path.string());
  for (std::size_t i = first; i < first + n; ++i) {
    const auto r = ds.encode_record(i);
    f.write(reinterpret_cast<const char*>(r.data()), static_cast<std::streamsize>(r.size()));
  }
}

/// Class-conditional synthetic images: each class owns a random low-frequency
/// template; examples are the template plus per-pixel noise. Learnable but not
/// trivially separable at high noise.
struct SyntheticSpec {
  std::size_t count = 512, classes = 10, size = 32, channels = 3;
  double noise = 0.35;
  std::uint64_t seed = 0;         // class templates
  std::uint64_t sample_seed = 0;  // per-example noise
};

inline Dataset synthetic_dataset(const SyntheticSpec& s) {
  Dataset ds;
  ds.count = s.count;
  ds.classes = s.classes;
  ds.channels = s.channels;
  ds.height = ds.width = s.size;
  ds.mean = {0.5, 0.5, 0.5};
  ds.std = {0.25, 0.25, 0.25};
  Rng trng(s.seed ^ 0x5eedULL);
  std::vector<std::vector<double>> templates(s.classes, std::vector<double>(ds.image_bytes()));
  for (auto& t : templates) {
    std::vector<double> fx(s.channels * 2), fy(s.channels * 2), ph(s.channels * 2);
    for (auto& v : fx) v = trng.uniform(0.5, 3.0);
    for (auto& v : fy) v = trng.uniform(0.5, 3.0);
    for (auto& v : ph) v = trng.uniform(0.0, 6.283185307179586);
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t y = 0; y < s.size; ++y)
        for (std::size_t x = 0; x < s.size; ++x) {
          const double u = double(x) / double(s.size), w = double(y) / double(s.size);
          double v = 0.5;
          for (int k = 0; k < 2; ++k) {
            const std::size_t j = c * 2 + k;
            v += 0.2 * std::sin(6.283185307179586 * (fx[j] * u + fy[j] * w) + ph[j]);
          }
          t[(c * s.size + y) * s.size + x] = v;
        }
  }
  Rng rng(s.sample_seed);
  ds.pixels.resize(s.count * ds.image_bytes());
  ds.labels.resize(s.count);
  for (std::size_t i = 0; i < s.count; ++i) {
    const std::size_t label = i % s.classes;
    ds.labels[i] = static_cast<std::uint8_t>(label);
    for (std::size_t p = 0; p < ds.image_bytes(); ++p) {
      const double v = templates[label][p] + s.noise * rng.normal();
      ds.pixels[i * ds.image_bytes() + p] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return ds;
}

}  // namespace vssd::train
