#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "vssd/core/tensor.hpp"

/// Causal state-space-duality reference forms. Every function here works on a
/// single sequence in float64 or float32 and is written for clarity; the
/// batched, differentiable versions live in ssd/autodiff.hpp.
namespace vssd::ssd {

/// Continuous parameters before discretisation: one negative scalar per head
/// (a_ring), per-token input matrix b_ring [L, N] and step sizes delta [L, Hd].
template <Real T>
struct ContinuousParams {
  std::vector<T> a_ring;
  Tensor<T> b_ring;
  Tensor<T> delta;
};

enum class ZohMode {
  FirstOrder,  // B = Δ·B̊, the form the kernels use
  Exact,       // B = (ΔÅ)⁻¹(exp(ΔÅ) − 1)·Δ·B̊, kept for comparison only
};

template <Real T>
struct Discretized {
  Tensor<T> A;  // [L, Hd]
  Tensor<T> B;  // [L, Hd, N]; a per-head copy because Δ is per head
};

template <Real T>
Discretized<T> discretize_zoh(const ContinuousParams<T>& p, ZohMode mode = ZohMode::FirstOrder) {
  require_rank(p.b_ring.shape(), 2, "discretize_zoh b_ring");
  require_rank(p.delta.shape(), 2, "discretize_zoh delta");
  const std::size_t L = p.b_ring.dim(0), N = p.b_ring.dim(1), Hd = p.a_ring.size();
  require_shape(p.delta.shape(), Shape{L, Hd}, "discretize_zoh delta");
  for (std::size_t h = 0; h < Hd; ++h) {
    if (!(p.a_ring[h] < T(0))) {
      throw ParameterDomainError("discretize_zoh: continuous A for head " + std::to_string(h) +
                                 " must be negative, got " + std::to_string(p.a_ring[h]));
    }
  }
  for (T d : p.delta.data()) {
    if (!(d >= T(0)) || !std::isfinite(d)) throw ParameterDomainError("discretize_zoh: delta must be non-negative");
  }
  Discretized<T> out{Tensor<T>({L, Hd}), Tensor<T>({L, Hd, N})};
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t h = 0; h < Hd; ++h) {
      const T d = p.delta(t, h);
      const T da = d * p.a_ring[h];
      out.A(t, h) = std::exp(da);
      T factor = d;
      if (mode == ZohMode::Exact && da != T(0)) factor = std::expm1(da) / p.a_ring[h];
      for (std::size_t n = 0; n < N; ++n) out.B(t, h, n) = factor * p.b_ring(t, n);
    }
  return out;
}

/// One sequence: X [L, Hd, P], B/C [L, N] shared across heads, scalar A [L, Hd].
template <Real T>
struct SsdSequenceInputs {
  Tensor<T> X;
  Tensor<T> B;
  Tensor<T> C;
  Tensor<T> A;

  std::size_t length() const { return X.dim(0); }
  std::size_t heads() const { return X.dim(1); }
  std::size_t headdim() const { return X.dim(2); }
  std::size_t state() const { return B.dim(1); }

  /// Shape checks plus the scalar-A range. A = 1 (no decay) and A = 0
  /// (memoryless) are admitted as limiting cases.
  void validate() const {
    require_rank(X.shape(), 3, "SsdSequenceInputs X");
    require_rank(B.shape(), 2, "SsdSequenceInputs B");
    const std::size_t L = X.dim(0), Hd = X.dim(1), N = B.dim(1);
    if (L == 0 || Hd == 0 || X.dim(2) == 0 || N == 0) throw DimensionError("SsdSequenceInputs: empty extent");
    require_shape(B.shape(), Shape{L, N}, "SsdSequenceInputs B");
    require_shape(C.shape(), Shape{L, N}, "SsdSequenceInputs C");
    require_shape(A.shape(), Shape{L, Hd}, "SsdSequenceInputs A");
    for (T a : A.data())
      if (!(a >= T(0) && a <= T(1))) throw ParameterDomainError("SsdSequenceInputs: A outside [0, 1]");
  }
};

/// h(t) = A_t·h(t−1) + B_t x(t)ᵀ, y(t) = C_tᵀ h(t), h(0) = 0; strictly sequential.
template <Real T>
Tensor<T> ssd_recurrent(const SsdSequenceInputs<T>& in) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), P = in.headdim(), N = in.state();
  Tensor<T> Y({L, Hd, P});
  std::vector<T> h(N * P);
  for (std::size_t head = 0; head < Hd; ++head) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < L; ++t) {
      const T a = in.A(t, head);
      const T* x = in.X.ptr() + (t * Hd + head) * P;
      for (std::size_t n = 0; n < N; ++n) {
        const T b = in.B(t, n);
        for (std::size_t p = 0; p < P; ++p) h[n * P + p] = a * h[n * P + p] + b * x[p];
      }
      T* y = Y.ptr() + (t * Hd + head) * P;
      for (std::size_t n = 0; n < N; ++n) {
        const T c = in.C(t, n);
        for (std::size_t p = 0; p < P; ++p) y[p] += c * h[n * P + p];
      }
    }
  }
  return Y;
}

/// Lower-triangular cumulative-product mask per head, [Hd, L, L]:
/// M[i,j] = A_{j+1}·…·A_i for i > j, 1 on the diagonal, 0 above.
template <Real T>
Tensor<T> build_mask_M(const Tensor<T>& A) {
  require_rank(A.shape(), 2, "build_mask_M");
  const std::size_t L = A.dim(0), Hd = A.dim(1);
  Tensor<T> M({Hd, L, L});
  for (std::size_t h = 0; h < Hd; ++h) {
    T* m = M.ptr() + h * L * L;
    for (std::size_t i = 0; i < L; ++i) {
      m[i * L + i] = T(1);
      // Walk left from the diagonal: M[i,j] = M[i,j+1]·A_{j+1}.
      for (std::size_t j = i; j-- > 0;) m[i * L + j] = m[i * L + j + 1] * A(j + 1, h);
    }
  }
  return M;
}

/// Y = (M ⊙ (C Bᵀ)) X, one L×L matrix per head.
template <Real T>
Tensor<T> ssd_quadratic(const SsdSequenceInputs<T>& in) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), P = in.headdim(), N = in.state();
  const Tensor<T> M = build_mask_M(in.A);
  std::vector<T> cb(L * L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      T s = 0;
      for (std::size_t n = 0; n < N; ++n) s += in.C(i, n) * in.B(j, n);
      cb[i * L + j] = s;
    }
  Tensor<T> Y({L, Hd, P});
  for (std::size_t h = 0; h < Hd; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      T* y = Y.ptr() + (i * Hd + h) * P;
      for (std::size_t j = 0; j <= i; ++j) {
        const T w = M[(h * L + i) * L + j] * cb[i * L + j];
        const T* x = in.X.ptr() + (j * Hd + h) * P;
        for (std::size_t p = 0; p < P; ++p) y[p] += w * x[p];
      }
    }
  return Y;
}

/// Materialised transfer matrix per head, [Hd, L, L]:
/// F[j,i] = C_jᵀ B_i · Π_{k=i+1..j} A_k for i ≤ j, else 0. The product is
/// formed directly for each entry, independent of build_mask_M.
template <Real T>
Tensor<T> ssd_matrix_form(const SsdSequenceInputs<T>& in) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), N = in.state();
  Tensor<T> F({Hd, L, L});
  for (std::size_t h = 0; h < Hd; ++h)
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t i = 0; i <= j; ++i) {
        T decay = 1;
        for (std::size_t k = i + 1; k <= j; ++k) decay *= in.A(k, h);
        T cb = 0;
        for (std::size_t n = 0; n < N; ++n) cb += in.C(j, n) * in.B(i, n);
        F[(h * L + j) * L + i] = cb * decay;
      }
  return F;
}

/// y = F x per head for F from ssd_matrix_form.
template <Real T>
Tensor<T> apply_matrix_form(const Tensor<T>& F, const Tensor<T>& X) {
  require_rank(F.shape(), 3, "apply_matrix_form F");
  require_rank(X.shape(), 3, "apply_matrix_form X");
  const std::size_t Hd = F.dim(0), L = F.dim(1), P = X.dim(2);
  require_shape(X.shape(), Shape{L, Hd, P}, "apply_matrix_form X");
  Tensor<T> Y({L, Hd, P});
  for (std::size_t h = 0; h < Hd; ++h)
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t i = 0; i < L; ++i) {
        const T f = F[(h * L + j) * L + i];
        if (f == T(0)) continue;
        for (std::size_t p = 0; p < P; ++p) Y[(j * Hd + h) * P + p] += f * X[(i * Hd + h) * P + p];
      }
  return Y;
}

/// Time-invariant kernel K = (CB, CAB, …, CA^{L−1}B) for scalar A.
template <Real T>
Tensor<T> lti_conv_kernel(T A, const Tensor<T>& B, const Tensor<T>& C, std::size_t L) {
  require_rank(B.shape(), 1, "lti_conv_kernel B");
  require_shape(C.shape(), B.shape(), "lti_conv_kernel C");
  T cb = 0;
  for (std::size_t n = 0; n < B.size(); ++n) cb += C[n] * B[n];
  Tensor<T> K({L});
  T a_pow = 1;
  for (std::size_t k = 0; k < L; ++k) {
    K[k] = cb * a_pow;
    a_pow *= A;
  }
  return K;
}

/// Causal convolution y_t = Σ_{k≤t} K_k x_{t−k}.
template <Real T>
Tensor<T> causal_conv(const Tensor<T>& x, const Tensor<T>& K) {
  require_rank(x.shape(), 1, "causal_conv x");
  require_shape(K.shape(), x.shape(), "causal_conv K");
  const std::size_t L = x.size();
  Tensor<T> y({L});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t k = 0; k <= t; ++k) y[t] += K[k] * x[t - k];
  return y;
}

/// Reverses the token axis (axis 0) of any tensor.
template <Real T>
Tensor<T> reverse_tokens(const Tensor<T>& t) {
  const std::size_t L = t.dim(0), row = t.size() / L;
  Tensor<T> out(t.shape());
  for (std::size_t i = 0; i < L; ++i)
    std::copy(t.ptr() + i * row, t.ptr() + (i + 1) * row, out.ptr() + (L - 1 - i) * row);
  return out;
}

/// Channel split of each head: first P/2 channels scan forward, the rest scan
/// the reversed sequence; the backward half is un-reversed before concatenation.
template <Real T>
Tensor<T> bi_ssd(const SsdSequenceInputs<T>& in) {
  in.validate();
  const std::size_t L = in.length(), Hd = in.heads(), P = in.headdim();
  if (P % 2 != 0) {
    throw UnsupportedConfiguration("bi_ssd: head width " + std::to_string(P) + " is odd; cannot split in halves");
  }
  const std::size_t half = P / 2;
  auto split = [&](std::size_t p0) {
    Tensor<T> x({L, Hd, half});
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t h = 0; h < Hd; ++h)
        for (std::size_t p = 0; p < half; ++p) x(t, h, p) = in.X(t, h, p0 + p);
    return x;
  };
  const Tensor<T> yf = ssd_recurrent(SsdSequenceInputs<T>{split(0), in.B, in.C, in.A});
  const Tensor<T> yb = reverse_tokens(ssd_recurrent(SsdSequenceInputs<T>{
      reverse_tokens(split(half)), reverse_tokens(in.B), reverse_tokens(in.C), reverse_tokens(in.A)}));
  Tensor<T> Y({L, Hd, P});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t h = 0; h < Hd; ++h)
      for (std::size_t p = 0; p < half; ++p) {
        Y(t, h, p) = yf(t, h, p);
        Y(t, h, half + p) = yb(t, h, p);
      }
  return Y;
}

}  // namespace vssd::ssd
