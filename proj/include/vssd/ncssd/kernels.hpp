#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vssd/core/blas.hpp"
#include "vssd/core/ops.hpp"
#include "vssd/core/tensor.hpp"
#include "vssd/ncssd/scan_route.hpp"

/// Non-causal SSD on a single sequence. Every token contributes B_j x_jᵀ
/// weighted by m_j to one hidden state per head; all tokens read it back
/// through their own C.
namespace vssd::ncssd {

/// X [L, Hd, P], B/C [L, N], m [L, Hd] > 0. token_index records the original
/// position of every row after a scan route has been applied (empty means the
/// rows are already in original order); reductions over tokens run in
/// ascending original index so the hidden state is independent of the route.
template <Real T>
struct NcssdInputs {
  Tensor<T> X;
  Tensor<T> B;
  Tensor<T> C;
  Tensor<T> m;
  std::vector<std::size_t> token_index;

  std::size_t length() const { return X.dim(0); }
  std::size_t heads() const { return X.dim(1); }
  std::size_t headdim() const { return X.dim(2); }
  std::size_t state() const { return B.dim(1); }

  void validate() const {
    require_rank(X.shape(), 3, "NcssdInputs X");
    require_rank(B.shape(), 2, "NcssdInputs B");
    const std::size_t L = X.dim(0), Hd = X.dim(1), N = B.dim(1);
    if (L == 0 || Hd == 0 || X.dim(2) == 0 || N == 0) throw DimensionError("NcssdInputs: empty extent");
    require_shape(B.shape(), Shape{L, N}, "NcssdInputs B");
    require_shape(C.shape(), Shape{L, N}, "NcssdInputs C");
    require_shape(m.shape(), Shape{L, Hd}, "NcssdInputs m");
    for (T v : m.data())
      if (!(v > T(0))) throw ParameterDomainError("NcssdInputs: m must be positive");
    if (!token_index.empty()) {
      if (token_index.size() != L) throw DimensionError("NcssdInputs: token_index length differs from L");
      ScanRoute{"token_index", token_index}.validate();
    }
  }

  /// Row holding original token k.
  std::vector<std::size_t> canonical_rows() const {
    const std::size_t L = length();
    std::vector<std::size_t> rows(L);
    for (std::size_t r = 0; r < L; ++r) rows[token_index.empty() ? r : token_index[r]] = r;
    return rows;
  }
};

struct NcssdOptions {
  /// Adds back the per-token m_i Z_i term that the global form drops.
  bool include_self_term = false;
};

template <Real T>
struct GlobalHiddenState {
  Tensor<T> H;  // [Hd, N, P]
};

/// Cumulative states of h(t) = h(t−1) + m_t B_t x_tᵀ in row order, [L, Hd, N, P].
template <Real T>
Tensor<T> ncssd_rewritten_recurrence(const NcssdInputs<T>& in) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), P = in.headdim(), N = in.state();
  Tensor<T> h({L, Hd, N, P});
  const std::size_t block = Hd * N * P;
  for (std::size_t t = 0; t < L; ++t) {
    T* cur = h.ptr() + t * block;
    if (t > 0) std::copy(cur - block, cur, cur);
    for (std::size_t hd = 0; hd < Hd; ++hd) {
      const T mt = in.m(t, hd);
      const T* x = in.X.ptr() + (t * Hd + hd) * P;
      for (std::size_t n = 0; n < N; ++n) {
        const T w = mt * in.B(t, n);
        T* row = cur + (hd * N + n) * P;
        for (std::size_t p = 0; p < P; ++p) row[p] += w * x[p];
      }
    }
  }
  return h;
}

/// H = Σ_j m_j B_j x_jᵀ per head, summed in ascending original token index.
template <Real T>
GlobalHiddenState<T> ncssd_hidden_state(const NcssdInputs<T>& in) {
  in.validate();
  const std::size_t Hd = in.heads(), P = in.headdim(), N = in.state();
  GlobalHiddenState<T> g{Tensor<T>({Hd, N, P})};
  for (std::size_t t : in.canonical_rows())
    for (std::size_t hd = 0; hd < Hd; ++hd) {
      const T mt = in.m(t, hd);
      const T* x = in.X.ptr() + (t * Hd + hd) * P;
      for (std::size_t n = 0; n < N; ++n) {
        const T w = mt * in.B(t, n);
        T* row = g.H.ptr() + (hd * N + n) * P;
        for (std::size_t p = 0; p < P; ++p) row[p] += w * x[p];
      }
    }
  return g;
}

/// Forward prefix Σ_{j≤i} m_j Z_j plus backward prefix Σ_{j≥i} m_j Z_j at the
/// 1-based row i, cross-checked against total + m_i Z_i. Returns [Hd, N, P].
template <Real T>
Tensor<T> bidir_hidden_identity(const NcssdInputs<T>& in, std::size_t i, T tol = T(1e-12)) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), P = in.headdim(), N = in.state();
  if (i < 1 || i > L) {
    throw ParameterDomainError("bidir_hidden_identity: index " + std::to_string(i) + " outside 1.." + std::to_string(L));
  }
  const std::size_t row = i - 1;
  Tensor<T> fwd({Hd, N, P}), bwd({Hd, N, P}), total({Hd, N, P});
  auto add_term = [&](Tensor<T>& acc, std::size_t t) {
    for (std::size_t hd = 0; hd < Hd; ++hd)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) acc(hd, n, p) += in.m(t, hd) * in.B(t, n) * in.X(t, hd, p);
  };
  for (std::size_t t = 0; t <= row; ++t) add_term(fwd, t);
  for (std::size_t t = L; t-- > row;) add_term(bwd, t);
  for (std::size_t t = 0; t < L; ++t) add_term(total, t);
  add_term(total, row);

  Tensor<T> Hi({Hd, N, P});
  T scale = 1;
  for (std::size_t k = 0; k < Hi.size(); ++k) {
    Hi[k] = fwd[k] + bwd[k];
    scale = std::max(scale, std::abs(total[k]));
  }
  const T err = max_abs_diff(Hi, total);
  if (err > tol * scale) {
    throw InternalConsistencyError("bidirectional hidden-state identity violated at i=" + std::to_string(i) +
                                   ": max diff " + std::to_string(err));
  }
  return Hi;
}

/// Three-step contraction with every intermediate materialised:
/// Z[l,h,n,p] = B[l,n]·X[l,h,p]; H[h,n,p] = Σ_l m[l,h]·Z[l,h,n,p]; Y[l,h,p] = Σ_n C[l,n]·H[h,n,p].
template <Real T>
Tensor<T> ncssd_contraction(const NcssdInputs<T>& in, NcssdOptions opt = {}) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), P = in.headdim(), N = in.state();
  Tensor<T> Z({L, Hd, N, P});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < Hd; ++h)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) Z(l, h, n, p) = in.B(l, n) * in.X(l, h, p);

  Tensor<T> H({Hd, N, P});
  for (std::size_t l : in.canonical_rows())
    for (std::size_t h = 0; h < Hd; ++h)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) H(h, n, p) += in.m(l, h) * Z(l, h, n, p);

  Tensor<T> Y({L, Hd, P});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < Hd; ++h)
      for (std::size_t p = 0; p < P; ++p) {
        T s = 0;
        for (std::size_t n = 0; n < N; ++n) {
          T hv = H(h, n, p);
          if (opt.include_self_term) hv += in.m(l, h) * Z(l, h, n, p);
          s += in.C(l, n) * hv;
        }
        Y(l, h, p) = s;
      }
  return Y;
}

/// Y = C (Bᵀ (X·m)) per head as two GEMMs; the largest intermediate is N×P.
template <Real T>
Tensor<T> ncssd_fused(const NcssdInputs<T>& in, NcssdOptions opt = {}) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), P = in.headdim(), N = in.state();
  const auto rows = in.canonical_rows();
  const bool canonical = in.token_index.empty();

  // B in original token order (a copy only when a route was applied).
  Tensor<T> Bc;
  if (!canonical) {
    Bc = Tensor<T>({L, N});
    for (std::size_t k = 0; k < L; ++k) std::copy_n(in.B.ptr() + rows[k] * N, N, Bc.ptr() + k * N);
  }
  const T* Bp = canonical ? in.B.ptr() : Bc.ptr();

  Tensor<T> Y({L, Hd, P});
  std::vector<T> xm(L * P), H(N * P);
  for (std::size_t h = 0; h < Hd; ++h) {
    for (std::size_t k = 0; k < L; ++k) {
      const std::size_t r = rows[k];
      const T mr = in.m(r, h);
      const T* x = in.X.ptr() + (r * Hd + h) * P;
      for (std::size_t p = 0; p < P; ++p) xm[k * P + p] = x[p] * mr;
    }
    gemm<T>(true, false, N, P, L, T(1), Bp, N, xm.data(), P, T(0), H.data(), P);
    gemm<T>(false, false, L, P, N, T(1), in.C.ptr(), N, H.data(), P, T(0), Y.ptr() + h * P, Hd * P);
    if (opt.include_self_term) {
      for (std::size_t l = 0; l < L; ++l) {
        T cb = 0;
        for (std::size_t n = 0; n < N; ++n) cb += in.C(l, n) * in.B(l, n);
        const T w = cb * in.m(l, h);
        for (std::size_t p = 0; p < P; ++p) Y(l, h, p) += w * in.X(l, h, p);
      }
    }
  }
  return Y;
}

/// Per-head projection parameters for m: w_delta [Hd, D], b_delta [Hd], a_log [Hd].
template <Real T>
struct MParams {
  Tensor<T> w_delta;
  Tensor<T> b_delta;
  Tensor<T> a_log;
};

/// m_t = exp(softplus(w_Δᵀ x_t + b_Δ) · (−exp(a_log))), [L, Hd].
template <Real T>
Tensor<T> compute_m(const Tensor<T>& x_tokens, const MParams<T>& p) {
  require_rank(x_tokens.shape(), 2, "compute_m x_tokens");
  require_rank(p.w_delta.shape(), 2, "compute_m w_delta");
  const std::size_t L = x_tokens.dim(0), D = x_tokens.dim(1), Hd = p.w_delta.dim(0);
  require_shape(p.w_delta.shape(), Shape{Hd, D}, "compute_m w_delta");
  require_shape(p.b_delta.shape(), Shape{Hd}, "compute_m b_delta");
  require_shape(p.a_log.shape(), Shape{Hd}, "compute_m a_log");
  Tensor<T> m({L, Hd});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t h = 0; h < Hd; ++h) {
      T z = p.b_delta[h];
      for (std::size_t d = 0; d < D; ++d) z += p.w_delta(h, d) * x_tokens(t, d);
      const T delta = ops::detail::softplus(z);
      m(t, h) = std::exp(-delta * std::exp(p.a_log[h]));
    }
  return m;
}

/// Permutes every per-token array by the route and tracks original indices.
template <Real T>
NcssdInputs<T> apply_scan_route(const NcssdInputs<T>& in, const ScanRoute& r) {
  in.validate();
  r.validate();
  if (r.size() != in.length()) {
    throw DimensionError("apply_scan_route: route length " + std::to_string(r.size()) + " vs L=" +
                         std::to_string(in.length()));
  }
  NcssdInputs<T> out{permute_tokens(in.X, r), permute_tokens(in.B, r), permute_tokens(in.C, r),
                     permute_tokens(in.m, r), std::vector<std::size_t>(r.size())};
  for (std::size_t k = 0; k < r.size(); ++k) out.token_index[k] = in.token_index.empty() ? r.order[k] : in.token_index[r.order[k]];
  return out;
}

}  // namespace vssd::ncssd
