#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vssd/core/conv.hpp"
#include "vssd/model/vssd.hpp"

namespace vssd::analysis {

/// Maps an input image [1, C, H, W] to NHWC features [1, h, w, c].
using FeatureFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

struct ErfMap {
  Tensor<double> grid;      // [H, W] at input resolution, max-normalized unless degenerate
  Tensor<double> log_grid;  // log(1 + x) of the raw mean saliency, max-normalized
  Tensor<double> raw;       // mean |gradient| before normalization
  bool degenerate = false;  // every entry exactly zero
  std::size_t images = 0;
  std::size_t out_h = 0, out_w = 0, center_y = 0, center_x = 0;

  /// Sum of raw saliency over the (H/gh)×(W/gw) pixel block of each token.
  Tensor<double> per_token(std::size_t gh, std::size_t gw) const {
    const std::size_t H = raw.dim(0), W = raw.dim(1);
    if (gh == 0 || gw == 0 || H % gh || W % gw) throw DimensionError("per_token: grid does not tile the map");
    Tensor<double> t({gh, gw});
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) t(y / (H / gh), x / (W / gw)) += raw(y, x);
    return t;
  }
};

/// Mean over images of |∂(Σ_c out[center, c]) / ∂input|, summed over input
/// channels. center defaults to the middle output token.
inline ErfMap erf_map(const FeatureFn& features, const std::vector<Tensor<double>>& images,
                      std::optional<std::pair<std::size_t, std::size_t>> center = std::nullopt) {
  if (images.empty()) throw ParameterDomainError("erf_map: no images");
  ErfMap m;
  for (const auto& img : images) {
    require_rank(img.shape(), 4, "erf_map image");
    if (img.dim(0) != 1) throw DimensionError("erf_map: images are processed one at a time");
    Tape<double> tape;
    Var<double> x = tape.leaf(img, true);
    Var<double> f = features(tape, x);
    require_rank(f.shape(), 4, "erf_map features");
    const std::size_t h = f.dim(1), w = f.dim(2), C = f.dim(3);
    const auto [cy, cx] = center.value_or(std::pair{h / 2, w / 2});
    if (cy >= h || cx >= w) {
      throw ParameterDomainError("erf_map: center token (" + std::to_string(cy) + ", " + std::to_string(cx) +
                                 ") outside the " + std::to_string(h) + "×" + std::to_string(w) + " output grid");
    }
    Tensor<double> sel(f.shape());
    for (std::size_t c = 0; c < C; ++c) sel(0, cy, cx, c) = 1.0;
    Var<double> target = ops::dot_const(f, sel);
    tape.backward(target);
    const auto g = tape.grad(x);
    const std::size_t H = img.dim(2), W = img.dim(3);
    if (m.images == 0) {
      m.raw = Tensor<double>({H, W});
      m.out_h = h;
      m.out_w = w;
      m.center_y = cy;
      m.center_x = cx;
    } else if (m.raw.dim(0) != H || m.raw.dim(1) != W) {
      throw DimensionError("erf_map: images must share one resolution");
    }
    for (std::size_t c = 0; c < img.dim(1); ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) m.raw(y, xx) += std::abs(g(0, c, y, xx));
    ++m.images;
  }
  for (auto& v : m.raw.data()) v /= double(m.images);
  const double mx = max_abs(m.raw);
  m.degenerate = mx == 0.0;
  m.grid = m.raw;
  m.log_grid = m.raw;
  for (auto& v : m.log_grid.data()) v = std::log1p(v);
  if (!m.degenerate) {
    for (auto& v : m.grid.data()) v /= mx;
    const double lmx = std::log1p(mx);
    for (auto& v : m.log_grid.data()) v /= lmx;
  }
  return m;
}

/// Features of a model after `stages` stages, evaluated in inference mode.
inline FeatureFn model_features(const model::VssdModel<double>& net, std::size_t stages) {
  return [&net, stages](Tape<double>& tape, Var<double> x) {
    auto p = net.params().bind(tape, false);
    return net.forward_features(tape, p, x, stages);
  };
}

/// Stack of depthwise 3×3 convolutions (no bias, no nonlinearity); each
/// weight is [C, 3, 3]. Analytic receptive field: (2·layers + 1)².
inline FeatureFn dwconv_stack_features(const std::vector<Tensor<double>>& weights) {
  return [&weights](Tape<double>& tape, Var<double> x) {
    Var<double> h = ops::nchw_to_nhwc(x);
    for (const auto& w : weights) h = ops::dwconv2d_nhwc(h, tape.leaf(w, false), nullptr);
    return h;
  };
}

}  // namespace vssd::analysis
