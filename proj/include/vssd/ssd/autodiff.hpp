#pragma once

#include <string>
#include <type_traits>
#include <vector>

#include "vssd/core/tape.hpp"

/// Batched, differentiable causal scans. Layout: X [Bt, L, Hd, P],
/// B/C [Bt, L, N], A [Bt, L, Hd]. The backward pass re-runs the forward scan
/// one (batch, head) slice at a time and keeps only that slice's states.
namespace vssd::ssd {

namespace detail {

struct ScanDims {
  std::size_t Bt, L, Hd, P, N;
};

template <Real T>
ScanDims scan_dims(const Tensor<T>& X, const Tensor<T>& B, const Tensor<T>& C, const Tensor<T>& A, const char* what) {
  require_rank(X.shape(), 4, what);
  require_rank(B.shape(), 3, what);
  ScanDims d{X.dim(0), X.dim(1), X.dim(2), X.dim(3), B.dim(2)};
  require_shape(B.shape(), Shape{d.Bt, d.L, d.N}, what);
  require_shape(C.shape(), Shape{d.Bt, d.L, d.N}, what);
  require_shape(A.shape(), Shape{d.Bt, d.L, d.Hd}, what);
  return d;
}

/// Channels [p0, p1) of head h in batch b; reverse walks tokens L−1 → 0.
/// When states is non-null it receives S after every step, [L][N·w].
template <Real T>
void scan_slice(const ScanDims& d, const T* X, const T* B, const T* C, const T* A, std::size_t b, std::size_t h,
                std::size_t p0, std::size_t p1, bool reverse, T* Y, std::type_identity_t<std::vector<T>>* states) {
  const std::size_t w = p1 - p0, N = d.N;
  std::vector<T> S(N * w, T(0));
  for (std::size_t s = 0; s < d.L; ++s) {
    const std::size_t t = reverse ? d.L - 1 - s : s;
    const T a = A[(b * d.L + t) * d.Hd + h];
    const T* x = X + ((b * d.L + t) * d.Hd + h) * d.P + p0;
    const T* bt = B + (b * d.L + t) * N;
    const T* ct = C + (b * d.L + t) * N;
    T* y = Y + ((b * d.L + t) * d.Hd + h) * d.P + p0;
    for (std::size_t n = 0; n < N; ++n) {
      T* row = S.data() + n * w;
      const T bn = bt[n];
      for (std::size_t p = 0; p < w; ++p) row[p] = a * row[p] + bn * x[p];
    }
    for (std::size_t p = 0; p < w; ++p) y[p] = T(0);
    for (std::size_t n = 0; n < N; ++n) {
      const T* row = S.data() + n * w;
      const T cn = ct[n];
      for (std::size_t p = 0; p < w; ++p) y[p] += cn * row[p];
    }
    if (states) std::copy(S.begin(), S.end(), states->begin() + s * N * w);
  }
}

template <Real T>
void scan_slice_backward(const ScanDims& d, const T* X, const T* B, const T* C, const T* A, const T* G,
                         std::size_t b, std::size_t h, std::size_t p0, std::size_t p1, bool reverse,
                         std::vector<T>& states, std::vector<T>& yscratch, T* dX, T* dB, T* dC, T* dA) {
  const std::size_t w = p1 - p0, N = d.N, L = d.L;
  states.resize(L * N * w);
  scan_slice(d, X, B, C, A, b, h, p0, p1, reverse, yscratch.data(), &states);
  std::vector<T> dS(N * w, T(0));
  for (std::size_t s = L; s-- > 0;) {
    const std::size_t t = reverse ? L - 1 - s : s;
    const std::size_t tok = b * L + t;
    const T a = A[tok * d.Hd + h];
    const T* x = X + (tok * d.Hd + h) * d.P + p0;
    const T* g = G + (tok * d.Hd + h) * d.P + p0;
    const T* bt = B + tok * N;
    const T* ct = C + tok * N;
    const T* Scur = states.data() + s * N * w;
    const T* Sprev = s > 0 ? states.data() + (s - 1) * N * w : nullptr;
    T* dx = dX ? dX + (tok * d.Hd + h) * d.P + p0 : nullptr;
    T da = 0;
    for (std::size_t n = 0; n < N; ++n) {
      T* ds = dS.data() + n * w;
      const T* sc = Scur + n * w;
      T dc = 0, db = 0;
      for (std::size_t p = 0; p < w; ++p) {
        dc += g[p] * sc[p];
        ds[p] += ct[n] * g[p];
        db += ds[p] * x[p];
      }
      if (dC) dC[tok * N + n] += dc;
      if (dB) dB[tok * N + n] += db;
      if (dx)
        for (std::size_t p = 0; p < w; ++p) dx[p] += ds[p] * bt[n];
      if (Sprev)
        for (std::size_t p = 0; p < w; ++p) da += ds[p] * Sprev[n * w + p];
      for (std::size_t p = 0; p < w; ++p) ds[p] *= a;
    }
    if (dA) dA[tok * d.Hd + h] += da;
  }
}

template <Real T>
Var<T> scan_op(Var<T> X, Var<T> B, Var<T> C, Var<T> A, bool bidirectional) {
  const char* what = bidirectional ? "bi_ssd_scan" : "ssd_scan";
  const ScanDims d = scan_dims(X.value(), B.value(), C.value(), A.value(), what);
  if (bidirectional && d.P % 2 != 0) {
    throw UnsupportedConfiguration(std::string(what) + ": head width " + std::to_string(d.P) + " is odd");
  }
  struct Part {
    std::size_t p0, p1;
    bool reverse;
  };
  std::vector<Part> parts;
  if (bidirectional) parts = {{0, d.P / 2, false}, {d.P / 2, d.P, true}};
  else parts = {{0, d.P, false}};

  Tensor<T> Y({d.Bt, d.L, d.Hd, d.P});
  const T *xp = X.value().ptr(), *bp = B.value().ptr(), *cp = C.value().ptr(), *ap = A.value().ptr();
  for (std::size_t b = 0; b < d.Bt; ++b)
    for (std::size_t h = 0; h < d.Hd; ++h)
      for (const Part& pt : parts) scan_slice(d, xp, bp, cp, ap, b, h, pt.p0, pt.p1, pt.reverse, Y.ptr(), nullptr);

  return X.tape->record(std::move(Y), {X, B, C, A}, [=](Tape<T>& tp, const Tensor<T>& g) {
    T* dX = tp.requires_grad(X) ? tp.grad_buffer(X).ptr() : nullptr;
    T* dB = tp.requires_grad(B) ? tp.grad_buffer(B).ptr() : nullptr;
    T* dC = tp.requires_grad(C) ? tp.grad_buffer(C).ptr() : nullptr;
    T* dA = tp.requires_grad(A) ? tp.grad_buffer(A).ptr() : nullptr;
    const T *xv = X.value().ptr(), *bv = B.value().ptr(), *cv = C.value().ptr(), *av = A.value().ptr();
    std::vector<T> states, yscratch(d.Bt * d.L * d.Hd * d.P);
    for (std::size_t b = 0; b < d.Bt; ++b)
      for (std::size_t h = 0; h < d.Hd; ++h)
        for (const Part& pt : parts)
          scan_slice_backward(d, xv, bv, cv, av, g.ptr(), b, h, pt.p0, pt.p1, pt.reverse, states, yscratch, dX, dB,
                              dC, dA);
  });
}

}  // namespace detail

/// Causal selective scan h_t = A_t h_{t−1} + B_t x_tᵀ, y_t = C_tᵀ h_t.
template <Real T>
Var<T> ssd_scan(Var<T> X, Var<T> B, Var<T> C, Var<T> A) {
  return detail::scan_op(X, B, C, A, false);
}

/// First half of each head's channels scans forward, second half backward.
template <Real T>
Var<T> bi_ssd_scan(Var<T> X, Var<T> B, Var<T> C, Var<T> A) {
  return detail::scan_op(X, B, C, A, true);
}

}  // namespace vssd::ssd
