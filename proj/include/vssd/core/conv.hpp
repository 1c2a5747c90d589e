#pragma once

#include <string>
#include <vector>

#include "vssd/core/blas.hpp"
#include "vssd/core/ops.hpp"

namespace vssd::ops {

namespace detail {

inline void require_odd_kernel(std::size_t k, const char* what) {
  if (k % 2 == 0) {
    throw UnsupportedConfiguration(std::string(what) + ": kernel size " + std::to_string(k) +
                                   " is even; only odd kernels are supported");
  }
}

}  // namespace detail

/// Per-channel 2-D cross-correlation, NCHW layout, stride 1, zero padding.
/// x: [B, C, H, W], w: [C, k, k], optional bias: [C].
template <Real T>
Var<T> dwconv2d(Var<T> x, Var<T> w, const std::type_identity_t<Var<T>>* bias, std::size_t pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv.shape(), 4, "dwconv2d input");
  require_rank(wv.shape(), 3, "dwconv2d weight");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3), k = wv.dim(1);
  detail::require_odd_kernel(k, "dwconv2d");
  require_shape(wv.shape(), Shape{C, k, k}, "dwconv2d weight");
  if (bias) require_shape(bias->shape(), Shape{C}, "dwconv2d bias");
  if (H + 2 * pad < k || W + 2 * pad < k) throw DimensionError("dwconv2d: kernel larger than padded input");
  const std::size_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  Tensor<T> out({B, C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.ptr() + (b * C + c) * H * W;
      const T* ker = wv.ptr() + c * k * k;
      T* dst = out.ptr() + (b * C + c) * Ho * Wo;
      const T b0 = bias ? bias->value()[c] : T(0);
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          T acc = b0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              acc += src[iy * W + ix] * ker[ky * k + kx];
            }
          }
          dst[oy * Wo + ox] = acc;
        }
    }
  std::vector<Var<T>> parents{x, w};
  const bool has_bias = bias != nullptr;
  const Var<T> bvar = has_bias ? *bias : Var<T>{};
  if (has_bias) parents.push_back(bvar);
  return x.tape->record(std::move(out), parents,
                        [x, w, bvar, has_bias, B, C, H, W, Ho, Wo, k, pad](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    Tensor<T>* gx = x.requires_grad() ? &t.grad_buffer(x) : nullptr;
    Tensor<T>* gw = w.requires_grad() ? &t.grad_buffer(w) : nullptr;
    Tensor<T>* gb = has_bias && bvar.requires_grad() ? &t.grad_buffer(bvar) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = xv.ptr() + (b * C + c) * H * W;
        const T* ker = wv.ptr() + c * k * k;
        const T* go = g.ptr() + (b * C + c) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const T d = go[oy * Wo + ox];
            if (gb) (*gb)[c] += d;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                if (gx) (*gx)[(b * C + c) * H * W + iy * W + ix] += d * ker[ky * k + kx];
                if (gw) (*gw)[c * k * k + ky * k + kx] += d * src[iy * W + ix];
              }
            }
          }
      }
  });
}

template <Real T>
Var<T> dwconv2d(Var<T> x, Var<T> w, std::size_t pad) {
  return dwconv2d<T>(x, w, nullptr, pad);
}

/// Channels-last depthwise convolution with "same" padding: x [B, H, W, C],
/// w [C, k, k], optional bias [C]. Used inside the backbone where activations
/// stay token-major.
template <Real T>
Var<T> dwconv2d_nhwc(Var<T> x, Var<T> w, const std::type_identity_t<Var<T>>* bias) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv.shape(), 4, "dwconv2d_nhwc input");
  const std::size_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
  require_rank(wv.shape(), 3, "dwconv2d_nhwc weight");
  const std::size_t k = wv.dim(1);
  detail::require_odd_kernel(k, "dwconv2d_nhwc");
  require_shape(wv.shape(), Shape{C, k, k}, "dwconv2d_nhwc weight");
  if (bias) require_shape(bias->shape(), Shape{C}, "dwconv2d_nhwc bias");
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  // [k*k, C] so the innermost loop runs over contiguous channels.
  std::vector<T> wt(k * k * C);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < k * k; ++q) wt[q * C + c] = wv[c * k * k + q];
  Tensor<T> out(xv.shape());
  const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::ptrdiff_t y = 0; y < Hs; ++y)
      for (std::ptrdiff_t xx = 0; xx < Ws; ++xx) {
        T* dst = out.ptr() + ((b * H + y) * W + xx) * C;
        if (bias)
          for (std::size_t c = 0; c < C; ++c) dst[c] = bias->value()[c];
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(ky) - pad;
          if (iy < 0 || iy >= Hs) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix = xx + static_cast<std::ptrdiff_t>(kx) - pad;
            if (ix < 0 || ix >= Ws) continue;
            const T* src = xv.ptr() + ((b * H + iy) * W + ix) * C;
            const T* ker = wt.data() + (ky * k + kx) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * ker[c];
          }
        }
      }
  std::vector<Var<T>> parents{x, w};
  const bool has_bias = bias != nullptr;
  const Var<T> bvar = has_bias ? *bias : Var<T>{};
  if (has_bias) parents.push_back(bvar);
  return x.tape->record(std::move(out), parents,
                        [x, w, bvar, has_bias, B, H, W, C, k, pad, wt = std::move(wt)](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
    Tensor<T>* gx = x.requires_grad() ? &t.grad_buffer(x) : nullptr;
    std::vector<T> gwt(w.requires_grad() ? k * k * C : 0, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::ptrdiff_t y = 0; y < Hs; ++y)
        for (std::ptrdiff_t xx = 0; xx < Ws; ++xx) {
          const T* go = g.ptr() + ((b * H + y) * W + xx) * C;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = y + static_cast<std::ptrdiff_t>(ky) - pad;
            if (iy < 0 || iy >= Hs) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = xx + static_cast<std::ptrdiff_t>(kx) - pad;
              if (ix < 0 || ix >= Ws) continue;
              const std::size_t off = ((b * H + iy) * W + ix) * C;
              const std::size_t q = (ky * k + kx) * C;
              if (gx) {
                T* dx = gx->ptr() + off;
                for (std::size_t c = 0; c < C; ++c) dx[c] += go[c] * wt[q + c];
              }
              if (!gwt.empty()) {
                const T* src = xv.ptr() + off;
                for (std::size_t c = 0; c < C; ++c) gwt[q + c] += go[c] * src[c];
              }
            }
          }
        }
    if (!gwt.empty()) {
      auto& gw = t.grad_buffer(w);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t q = 0; q < k * k; ++q) gw[c * k * k + q] += gwt[q * C + c];
    }
    if (has_bias && bvar.requires_grad()) {
      auto& gb = t.grad_buffer(bvar);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % C] += g[i];
    }
  });
}

/// Dense channels-last convolution via im2col + GEMM.
/// x [B, H, W, Cin], w [Cout, k, k, Cin], optional bias [Cout].
template <Real T>
Var<T> conv2d_nhwc(Var<T> x, Var<T> w, const std::type_identity_t<Var<T>>* bias, std::size_t stride, std::size_t pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv.shape(), 4, "conv2d_nhwc input");
  require_rank(wv.shape(), 4, "conv2d_nhwc weight");
  const std::size_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Cin = xv.dim(3);
  const std::size_t Cout = wv.dim(0), k = wv.dim(1);
  require_shape(wv.shape(), Shape{Cout, k, k, Cin}, "conv2d_nhwc weight");
  if (bias) require_shape(bias->shape(), Shape{Cout}, "conv2d_nhwc bias");
  if (stride == 0) throw UnsupportedConfiguration("conv2d_nhwc: stride must be positive");
  if (H + 2 * pad < k || W + 2 * pad < k) throw DimensionError("conv2d_nhwc: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t M = B * Ho * Wo, K = k * k * Cin;
  std::vector<T> cols(M * K, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T* row = cols.data() + ((b * Ho + oy) * Wo + ox) * K;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const T* src = xv.ptr() + ((b * H + iy) * W + ix) * Cin;
            std::copy(src, src + Cin, row + (ky * k + kx) * Cin);
          }
        }
      }
  Tensor<T> out({B, Ho, Wo, Cout});
  if (bias)
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t o = 0; o < Cout; ++o) out[i * Cout + o] = bias->value()[o];
  gemm<T>(false, true, M, Cout, K, T(1), cols.data(), K, wv.ptr(), K, bias ? T(1) : T(0), out.ptr(), Cout);
  std::vector<Var<T>> parents{x, w};
  const bool has_bias = bias != nullptr;
  const Var<T> bvar = has_bias ? *bias : Var<T>{};
  if (has_bias) parents.push_back(bvar);
  return x.tape->record(
      std::move(out), parents,
      [x, w, bvar, has_bias, B, H, W, Cin, Cout, k, stride, pad, Ho, Wo, M, K, cols = std::move(cols)](
          Tape<T>& t, const Tensor<T>& g) {
        if (w.requires_grad())
          gemm<T>(true, false, Cout, K, M, T(1), g.ptr(), Cout, cols.data(), K, T(1), t.grad_buffer(w).ptr(), K);
        if (has_bias && bvar.requires_grad()) {
          auto& gb = t.grad_buffer(bvar);
          for (std::size_t i = 0; i < M; ++i)
            for (std::size_t o = 0; o < Cout; ++o) gb[o] += g[i * Cout + o];
        }
        if (x.requires_grad()) {
          std::vector<T> dcols(M * K);
          gemm<T>(false, false, M, K, Cout, T(1), g.ptr(), Cout, w.value().ptr(), K, T(0), dcols.data(), K);
          auto& gx = t.grad_buffer(x);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oy = 0; oy < Ho; ++oy)
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const T* row = dcols.data() + ((b * Ho + oy) * Wo + ox) * K;
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    T* dst = gx.ptr() + ((b * H + iy) * W + ix) * Cin;
                    const T* src = row + (ky * k + kx) * Cin;
                    for (std::size_t c = 0; c < Cin; ++c) dst[c] += src[c];
                  }
                }
              }
        }
      });
}

}  // namespace vssd::ops
