#pragma once

#include <vector>

#include "vssd/core/blas.hpp"
#include "vssd/core/tape.hpp"

/// Batched, differentiable NC-SSD. Layout: X [Bt, L, Hd, P], B/C [Bt, L, N],
/// m [Bt, L, Hd]; tokens are summed in row order.
namespace vssd::ncssd {

namespace detail {

struct Dims {
  std::size_t Bt, L, Hd, P, N;
};

template <Real T>
Dims dims(Var<T> X, Var<T> B, Var<T> C, Var<T> m, const char* what) {
  require_rank(X.shape(), 4, what);
  require_rank(B.shape(), 3, what);
  Dims d{X.dim(0), X.dim(1), X.dim(2), X.dim(3), B.dim(2)};
  require_shape(B.shape(), Shape{d.Bt, d.L, d.N}, what);
  require_shape(C.shape(), Shape{d.Bt, d.L, d.N}, what);
  require_shape(m.shape(), Shape{d.Bt, d.L, d.Hd}, what);
  return d;
}

/// xm[l, p] = X[b, l, h, p] · m[b, l, h]
template <Real T>
void scaled_values(const Dims& d, const T* X, const T* m, std::size_t b, std::size_t h, T* xm) {
  for (std::size_t l = 0; l < d.L; ++l) {
    const std::size_t tok = b * d.L + l;
    const T w = m[tok * d.Hd + h];
    const T* x = X + (tok * d.Hd + h) * d.P;
    for (std::size_t p = 0; p < d.P; ++p) xm[l * d.P + p] = x[p] * w;
  }
}

}  // namespace detail

/// Y = C (Bᵀ (X·m)) via two GEMMs per (batch, head). Keeps H [Bt, Hd, N, P]
/// for the backward pass.
template <Real T>
Var<T> ncssd_fused(Var<T> X, Var<T> B, Var<T> C, Var<T> m) {
  const auto d = detail::dims(X, B, C, m, "ncssd_fused");
  const std::size_t L = d.L, P = d.P, N = d.N, Hd = d.Hd;
  Tensor<T> Y({d.Bt, L, Hd, P});
  Tensor<T> H({d.Bt, Hd, N, P});
  std::vector<T> xm(L * P);
  for (std::size_t b = 0; b < d.Bt; ++b) {
    const T* Bb = B.value().ptr() + b * L * N;
    const T* Cb = C.value().ptr() + b * L * N;
    for (std::size_t h = 0; h < Hd; ++h) {
      detail::scaled_values(d, X.value().ptr(), m.value().ptr(), b, h, xm.data());
      T* Hh = H.ptr() + (b * Hd + h) * N * P;
      gemm<T>(true, false, N, P, L, T(1), Bb, N, xm.data(), P, T(0), Hh, P);
      gemm<T>(false, false, L, P, N, T(1), Cb, N, Hh, P, T(0), Y.ptr() + (b * L * Hd + h) * P, Hd * P);
    }
  }
  return X.tape->record(std::move(Y), {X, B, C, m}, [=, H = std::move(H)](Tape<T>& tp, const Tensor<T>& g) {
    const bool gx = tp.requires_grad(X), gb = tp.requires_grad(B), gc = tp.requires_grad(C), gm = tp.requires_grad(m);
    std::vector<T> xm(L * P), dH(N * P), dXM(L * P);
    for (std::size_t b = 0; b < d.Bt; ++b) {
      const T* Bb = B.value().ptr() + b * L * N;
      const T* Cb = C.value().ptr() + b * L * N;
      for (std::size_t h = 0; h < Hd; ++h) {
        const T* G = g.ptr() + (b * L * Hd + h) * P;
        const T* Hh = H.ptr() + (b * Hd + h) * N * P;
        if (gc) gemm<T>(false, true, L, N, P, T(1), G, Hd * P, Hh, P, T(1), tp.grad_buffer(C).ptr() + b * L * N, N);
        if (!(gx || gb || gm)) continue;
        gemm<T>(true, false, N, P, L, T(1), Cb, N, G, Hd * P, T(0), dH.data(), P);
        if (gb) {
          detail::scaled_values(d, X.value().ptr(), m.value().ptr(), b, h, xm.data());
          gemm<T>(false, true, L, N, P, T(1), xm.data(), P, dH.data(), P, T(1), tp.grad_buffer(B).ptr() + b * L * N, N);
        }
        if (gx || gm) {
          gemm<T>(false, false, L, P, N, T(1), Bb, N, dH.data(), P, T(0), dXM.data(), P);
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t tok = b * L + l;
            const T* x = X.value().ptr() + (tok * Hd + h) * P;
            const T w = m.value()[tok * Hd + h];
            const T* dxm = dXM.data() + l * P;
            if (gx) {
              T* dx = tp.grad_buffer(X).ptr() + (tok * Hd + h) * P;
              for (std::size_t p = 0; p < P; ++p) dx[p] += dxm[p] * w;
            }
            if (gm) {
              T s = 0;
              for (std::size_t p = 0; p < P; ++p) s += dxm[p] * x[p];
              tp.grad_buffer(m)[tok * Hd + h] += s;
            }
          }
        }
      }
    }
  });
}

/// Eq.-9-style evaluation: materialises Z = B ⊗ X for every token of a
/// (batch, head) slice, reduces it against m into H, then contracts with C.
/// Plain loops, no BLAS.
template <Real T>
Var<T> ncssd_contraction(Var<T> X, Var<T> B, Var<T> C, Var<T> m) {
  const auto d = detail::dims(X, B, C, m, "ncssd_contraction");
  const std::size_t L = d.L, P = d.P, N = d.N, Hd = d.Hd;
  Tensor<T> Y({d.Bt, L, Hd, P});
  Tensor<T> H({d.Bt, Hd, N, P});
  std::vector<T> Z(L * N * P);
  const T *xv = X.value().ptr(), *bv = B.value().ptr(), *cv = C.value().ptr(), *mv = m.value().ptr();
  for (std::size_t b = 0; b < d.Bt; ++b)
    for (std::size_t h = 0; h < Hd; ++h) {
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t tok = b * L + l;
        const T* x = xv + (tok * Hd + h) * P;
        for (std::size_t n = 0; n < N; ++n) {
          T* z = Z.data() + (l * N + n) * P;
          const T bn = bv[tok * N + n];
          for (std::size_t p = 0; p < P; ++p) z[p] = bn * x[p];
        }
      }
      T* Hh = H.ptr() + (b * Hd + h) * N * P;
      for (std::size_t l = 0; l < L; ++l) {
        const T w = mv[(b * L + l) * Hd + h];
        const T* z = Z.data() + l * N * P;
        for (std::size_t k = 0; k < N * P; ++k) Hh[k] += w * z[k];
      }
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t tok = b * L + l;
        T* y = Y.ptr() + (tok * Hd + h) * P;
        for (std::size_t n = 0; n < N; ++n) {
          const T cn = cv[tok * N + n];
          const T* hr = Hh + n * P;
          for (std::size_t p = 0; p < P; ++p) y[p] += cn * hr[p];
        }
      }
    }
  return X.tape->record(std::move(Y), {X, B, C, m}, [=, H = std::move(H)](Tape<T>& tp, const Tensor<T>& g) {
    const T *xv = X.value().ptr(), *bv = B.value().ptr(), *cv = C.value().ptr(), *mv = m.value().ptr();
    T* dX = tp.requires_grad(X) ? tp.grad_buffer(X).ptr() : nullptr;
    T* dB = tp.requires_grad(B) ? tp.grad_buffer(B).ptr() : nullptr;
    T* dC = tp.requires_grad(C) ? tp.grad_buffer(C).ptr() : nullptr;
    T* dm = tp.requires_grad(m) ? tp.grad_buffer(m).ptr() : nullptr;
    std::vector<T> dH(N * P), Z(L * N * P);
    for (std::size_t b = 0; b < d.Bt; ++b)
      for (std::size_t h = 0; h < Hd; ++h) {
        const T* Hh = H.ptr() + (b * Hd + h) * N * P;
        std::fill(dH.begin(), dH.end(), T(0));
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t tok = b * L + l;
          const T* gy = g.ptr() + (tok * Hd + h) * P;
          for (std::size_t n = 0; n < N; ++n) {
            const T cn = cv[tok * N + n];
            T dc = 0;
            for (std::size_t p = 0; p < P; ++p) {
              dH[n * P + p] += cn * gy[p];
              dc += gy[p] * Hh[n * P + p];
            }
            if (dC) dC[tok * N + n] += dc;
          }
        }
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t tok = b * L + l;
          const T* x = xv + (tok * Hd + h) * P;
          const T w = mv[tok * Hd + h];
          T* z = Z.data() + l * N * P;
          T dw = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const T bn = bv[tok * N + n];
            T db = 0;
            for (std::size_t p = 0; p < P; ++p) {
              z[n * P + p] = bn * x[p];
              const T dz = w * dH[n * P + p];
              dw += dH[n * P + p] * z[n * P + p];
              db += dz * x[p];
              if (dX) dX[(tok * Hd + h) * P + p] += dz * bn;
            }
            if (dB) dB[tok * N + n] += db;
          }
          if (dm) dm[tok * Hd + h] += dw;
        }
      }
  });
}

}  // namespace vssd::ncssd
