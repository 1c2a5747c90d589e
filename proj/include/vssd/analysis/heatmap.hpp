#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vssd/model/vssd.hpp"

namespace vssd::analysis {

struct HeatGrid {
  std::size_t stage = 0;  // zero-based
  Tensor<double> raw;     // [H, W] head-averaged m
  Tensor<double> normalized;
  bool constant = false;  // max == min; normalized is all zeros
};

/// Min-max normalization into [0, 1]. A constant grid maps to zeros.
inline Tensor<double> min_max_normalize(const Tensor<double>& g, bool* constant = nullptr) {
  Tensor<double> out(g.shape());
  if (g.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(g.data().begin(), g.data().end());
  const double a = *lo, span = *hi - *lo;
  if (constant) *constant = !(span > 0.0);
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = (g[i] - a) / span;
  return out;
}

/// Bilinear resize with half-pixel centers and edge clamping. For odd integer
/// factors an output pixel lands on every input sample, so the argmax cell is kept.
inline Tensor<double> bilinear_upsample(const Tensor<double>& g, std::size_t H, std::size_t W) {
  require_rank(g.shape(), 2, "bilinear_upsample");
  const std::size_t h = g.dim(0), w = g.dim(1);
  if (h == 0 || w == 0 || H == 0 || W == 0) throw DimensionError("bilinear_upsample: empty grid");
  Tensor<double> out({H, W});
  auto coord = [](std::size_t o, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (double(o) + 0.5) * double(in) / double(outn) - 0.5;
    s = std::clamp(s, 0.0, double(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - double(i0);
  };
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, h, H, y0, y1, fy);
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, w, W, x0, x1, fx);
      const double top = g(y0, x0) * (1 - fx) + g(y0, x1) * fx;
      const double bot = g(y1, x0) * (1 - fx) + g(y1, x1) * fx;
      out(y, x) = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

/// Head-averaged m of one traced stage for batch element b.
inline HeatGrid heat_from_trace(const model::ForwardTrace<double>& tr, std::size_t stage, std::size_t b = 0) {
  for (const auto& e : tr.m) {
    if (e.stage != stage) continue;
    const std::size_t L = e.m.dim(1), heads = e.m.dim(2);
    if (L != e.H * e.W) throw InternalConsistencyError("m trace does not match the stage grid");
    HeatGrid hg;
    hg.stage = stage;
    hg.raw = Tensor<double>({e.H, e.W});
    for (std::size_t l = 0; l < L; ++l) {
      double s = 0;
      for (std::size_t h = 0; h < heads; ++h) s += e.m(b, l, h);
      hg.raw[l] = s / double(heads);
    }
    hg.normalized = min_max_normalize(hg.raw, &hg.constant);
    return hg;
  }
  throw ParameterDomainError("m_heatmap: stage " + std::to_string(stage + 1) + " has no NC-SSD block producing m");
}

/// One inference pass over image [1, C, H, W]; returns a grid for every stage
/// whose mixer produces m.
inline std::vector<HeatGrid> m_heatmap(const model::VssdModel<double>& net, const Tensor<double>& image) {
  require_rank(image.shape(), 4, "m_heatmap image");
  model::ForwardTrace<double> tr;
  model::predict(net, image, &tr);
  std::vector<HeatGrid> out;
  for (const auto& e : tr.m) out.push_back(heat_from_trace(tr, e.stage));
  return out;
}

inline HeatGrid m_heatmap(const model::VssdModel<double>& net, const Tensor<double>& image, std::size_t stage) {
  if (stage >= net.config().stages.size()) {
    throw ParameterDomainError("m_heatmap: stage " + std::to_string(stage + 1) + " of " +
                               std::to_string(net.config().stages.size()));
  }
  model::ForwardTrace<double> tr;
  model::predict(net, image, &tr);
  return heat_from_trace(tr, stage);
}

}  // namespace vssd::analysis
