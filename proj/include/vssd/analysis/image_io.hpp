#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vssd/core/tensor.hpp"

/// Binary PGM (P5) and PPM (P6), 8-bit, maxval 255.
namespace vssd::analysis {

inline std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;
  return static_cast<std::uint8_t>(std::lround(std::min(v, 1.0) * 255.0));
}

/// grid [H, W] with values in [0, 1].
inline void write_pgm(const std::filesystem::path& path, const Tensor<double>& grid) {
  require_rank(grid.shape(), 2, "write_pgm");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "P5\n" << grid.dim(1) << ' ' << grid.dim(0) << "\n255\n";
  for (double v : grid.data()) f.put(static_cast<char>(to_byte(v)));
  if (!f) throw FormatError("write failed for " + path.string());
}

/// rgb [H, W, 3] with values in [0, 1].
inline void write_ppm(const std::filesystem::path& path, const Tensor<double>& rgb) {
  require_rank(rgb.shape(), 3, "write_ppm");
  if (rgb.dim(2) != 3) throw DimensionError("write_ppm: last axis must be 3");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "P6\n" << rgb.dim(1) << ' ' << rgb.dim(0) << "\n255\n";
  for (double v : rgb.data()) f.put(static_cast<char>(to_byte(v)));
  if (!f) throw FormatError("write failed for " + path.string());
}

struct Netpbm {
  int channels = 1;  // 1 for P5, 3 for P6
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};

inline Netpbm read_netpbm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::string magic;
  f >> magic;
  Netpbm img;
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw FormatError(path.string() + ": not a binary PGM/PPM (magic '" + magic + "')");
  auto next_int = [&]() {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string line;
      std::getline(f, line);
      f >> std::ws;
    }
    long v = -1;
    f >> v;
    if (!f || v <= 0) throw FormatError(path.string() + ": malformed header");
    return static_cast<std::size_t>(v);
  };
  img.width = next_int();
  img.height = next_int();
  if (next_int() != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  f.get();
  img.pixels.resize(img.width * img.height * img.channels);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  return img;
}

/// [1, 3, H, W] in [0, 1] from a PGM (replicated to 3 channels) or PPM file.
inline Tensor<double> load_image(const std::filesystem::path& path) {
  const auto img = read_netpbm(path);
  Tensor<double> t({1, 3, img.height, img.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const std::size_t src = (y * img.width + x) * img.channels + (img.channels == 3 ? c : 0);
        t(0, c, y, x) = img.pixels[src] / 255.0;
      }
  return t;
}

}  // namespace vssd::analysis
