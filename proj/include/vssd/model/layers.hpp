#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vssd/core/blas.hpp"
#include "vssd/core/ops.hpp"

namespace vssd::model {

/// y[r, h, p] = x[r, h, p]·s[r, h] for x [..., Hd, P], s [..., Hd] (same leading extents).
template <Real T>
Var<T> scale_heads(Var<T> x, Var<T> s) {
  const auto& xv = x.value();
  const auto& sv = s.value();
  if (xv.rank() < 2 || sv.size() * xv.shape().back() != xv.size() || sv.shape().back() != xv.dim(xv.rank() - 2)) {
    throw DimensionError("scale_heads: " + to_string(xv.shape()) + " vs " + to_string(sv.shape()));
  }
  const std::size_t P = xv.shape().back();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv[i / P];
  return x.tape->record(std::move(out), {x, s}, [x, s, P](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& sv = s.value();
    if (x.requires_grad()) {
      auto& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv[i / P];
    }
    if (s.requires_grad()) {
      auto& gs = t.grad_buffer(s);
      for (std::size_t i = 0; i < g.size(); ++i) gs[i / P] += g[i] * xv[i];
    }
  });
}

/// y[..., h, p] = x[..., h, p]·d[h] for a per-head vector d [Hd].
template <Real T>
Var<T> mul_heads(Var<T> x, Var<T> d) {
  const auto& xv = x.value();
  const auto& dv = d.value();
  require_rank(dv.shape(), 1, "mul_heads vector");
  if (xv.rank() < 2 || xv.dim(xv.rank() - 2) != dv.size()) {
    throw DimensionError("mul_heads: " + to_string(xv.shape()) + " vs " + to_string(dv.shape()));
  }
  const std::size_t P = xv.shape().back(), Hd = dv.size();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * dv[(i / P) % Hd];
  return x.tape->record(std::move(out), {x, d}, [x, d, P, Hd](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& dv = d.value();
    if (x.requires_grad()) {
      auto& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dv[(i / P) % Hd];
    }
    if (d.requires_grad()) {
      auto& gd = t.grad_buffer(d);
      for (std::size_t i = 0; i < g.size(); ++i) gd[(i / P) % Hd] += g[i] * xv[i];
    }
  });
}

namespace detail {

/// Copies head h of part `part` (0 = q, 1 = k, 2 = v) out of a token-major
/// [L, 3C] block into a contiguous [L, dh] buffer.
template <Real T>
void gather_head(const T* qkv, std::size_t L, std::size_t C, std::size_t dh, std::size_t part, std::size_t h, T* dst) {
  for (std::size_t l = 0; l < L; ++l) std::copy_n(qkv + l * 3 * C + part * C + h * dh, dh, dst + l * dh);
}

template <Real T>
void scatter_add_head(const T* src, std::size_t L, std::size_t C, std::size_t dh, std::size_t part, std::size_t h, T* qkv) {
  for (std::size_t l = 0; l < L; ++l) {
    T* d = qkv + l * 3 * C + part * C + h * dh;
    for (std::size_t i = 0; i < dh; ++i) d[i] += src[l * dh + i];
  }
}

template <Real T>
void softmax_rows(T* s, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = s + r * cols;
    T mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) sum += (row[c] = std::exp(row[c] - mx));
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
  }
}

}  // namespace detail

/// Softmax attention weights of head h for one sequence, [L, L]; rows sum to 1.
template <Real T>
Tensor<T> attention_weights(const Tensor<T>& qkv, std::size_t heads, std::size_t h) {
  require_rank(qkv.shape(), 2, "attention_weights qkv");
  const std::size_t L = qkv.dim(0), C = qkv.dim(1) / 3, dh = C / heads;
  std::vector<T> q(L * dh), k(L * dh);
  detail::gather_head(qkv.ptr(), L, C, dh, 0, h, q.data());
  detail::gather_head(qkv.ptr(), L, C, dh, 1, h, k.data());
  Tensor<T> S({L, L});
  gemm<T>(false, true, L, L, dh, T(1) / std::sqrt(T(dh)), q.data(), dh, k.data(), dh, T(0), S.ptr(), L);
  detail::softmax_rows(S.ptr(), L, L);
  return S;
}

/// Multi-head softmax attention over tokens. qkv [B, L, 3C] packs per token
/// [q | k | v], each split into `heads` contiguous groups; output [B, L, C].
/// Without gradient recording, rows are processed in blocks so the L×L score
/// matrix is never held in full.
template <Real T>
Var<T> multi_head_attention(Var<T> qkv, std::size_t heads) {
  const auto& in = qkv.value();
  require_rank(in.shape(), 3, "multi_head_attention");
  const std::size_t B = in.dim(0), L = in.dim(1);
  if (in.dim(2) % 3 != 0) throw DimensionError("multi_head_attention: last axis not divisible by 3");
  const std::size_t C = in.dim(2) / 3;
  if (heads == 0 || C % heads != 0) throw ConfigError("multi_head_attention: channels not divisible by heads");
  const std::size_t dh = C / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const bool keep = qkv.tape->grad_enabled() && qkv.requires_grad();
  const std::size_t rows = keep ? L : std::min<std::size_t>(L, 512);

  Tensor<T> out({B, L, C});
  Tensor<T> probs;
  if (keep) probs = Tensor<T>({B, heads, L, L});
  std::vector<T> q(L * dh), k(L * dh), v(L * dh), o(L * dh), s(keep ? 0 : rows * L);
  for (std::size_t b = 0; b < B; ++b) {
    const T* base = in.ptr() + b * L * 3 * C;
    for (std::size_t h = 0; h < heads; ++h) {
      detail::gather_head(base, L, C, dh, 0, h, q.data());
      detail::gather_head(base, L, C, dh, 1, h, k.data());
      detail::gather_head(base, L, C, dh, 2, h, v.data());
      for (std::size_t r0 = 0; r0 < L; r0 += rows) {
        const std::size_t nr = std::min(rows, L - r0);
        T* S = keep ? probs.ptr() + ((b * heads + h) * L + r0) * L : s.data();
        gemm<T>(false, true, nr, L, dh, scale, q.data() + r0 * dh, dh, k.data(), dh, T(0), S, L);
        detail::softmax_rows(S, nr, L);
        gemm<T>(false, false, nr, dh, L, T(1), S, L, v.data(), dh, T(0), o.data() + r0 * dh, dh);
      }
      for (std::size_t l = 0; l < L; ++l) std::copy_n(o.data() + l * dh, dh, out.ptr() + (b * L + l) * C + h * dh);
    }
  }
  return qkv.tape->record(std::move(out), {qkv}, [=, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
    auto& gq = t.grad_buffer(qkv);
    std::vector<T> q(L * dh), k(L * dh), v(L * dh), go(L * dh), dP(L * L), dq(L * dh), dk(L * dh), dv(L * dh);
    for (std::size_t b = 0; b < B; ++b) {
      const T* base = qkv.value().ptr() + b * L * 3 * C;
      T* gbase = gq.ptr() + b * L * 3 * C;
      for (std::size_t h = 0; h < heads; ++h) {
        const T* P = probs.ptr() + (b * heads + h) * L * L;
        detail::gather_head(base, L, C, dh, 0, h, q.data());
        detail::gather_head(base, L, C, dh, 1, h, k.data());
        detail::gather_head(base, L, C, dh, 2, h, v.data());
        for (std::size_t l = 0; l < L; ++l) std::copy_n(g.ptr() + (b * L + l) * C + h * dh, dh, go.data() + l * dh);
        gemm<T>(true, false, L, dh, L, T(1), P, L, go.data(), dh, T(0), dv.data(), dh);
        gemm<T>(false, true, L, L, dh, T(1), go.data(), dh, v.data(), dh, T(0), dP.data(), L);
        for (std::size_t i = 0; i < L; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < L; ++j) dot += dP[i * L + j] * P[i * L + j];
          for (std::size_t j = 0; j < L; ++j) dP[i * L + j] = P[i * L + j] * (dP[i * L + j] - dot);
        }
        gemm<T>(false, false, L, dh, L, scale, dP.data(), L, k.data(), dh, T(0), dq.data(), dh);
        gemm<T>(true, false, L, dh, L, scale, dP.data(), L, q.data(), dh, T(0), dk.data(), dh);
        detail::scatter_add_head(dq.data(), L, C, dh, 0, h, gbase);
        detail::scatter_add_head(dk.data(), L, C, dh, 1, h, gbase);
        detail::scatter_add_head(dv.data(), L, C, dh, 2, h, gbase);
      }
    }
  });
}

}  // namespace vssd::model
