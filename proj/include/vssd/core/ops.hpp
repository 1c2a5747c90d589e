#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vssd/core/blas.hpp"
#include "vssd/core/tape.hpp"
#include "vssd/core/tensor.hpp"

/// Differentiable tensor operations. Shapes must match exactly; the only
/// implicit broadcast is a single-element operand against a full tensor.
namespace vssd::ops {

namespace detail {

template <Real T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0, n = src.size(); i < n; ++i) d[i] += s[i];
}

template <Real T>
void accumulate_scaled(Tensor<T>& dst, const Tensor<T>& src, T scale) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0, n = src.size(); i < n; ++i) d[i] += scale * s[i];
}

template <Real T>
T sum_all(const Tensor<T>& t) {
  T s = 0;
  for (T v : t.data()) s += v;
  return s;
}

enum class Broadcast { None, LeftScalar, RightScalar };

template <Real T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (b.size() == 1) return Broadcast::RightScalar;
  if (a.size() == 1) return Broadcast::LeftScalar;
  throw DimensionError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
}

template <Real T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <Real T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <Real T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <Real T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace detail

// ---------------------------------------------------------------- binary ---

template <Real T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "add");
  Tensor<T> out = kind == detail::Broadcast::LeftScalar ? bv : av;
  if (kind == detail::Broadcast::None) {
    detail::accumulate(out, bv);
  } else {
    const T s = kind == detail::Broadcast::RightScalar ? bv[0] : av[0];
    for (auto& v : out.data()) v += s;
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, kind](Tape<T>& t, const Tensor<T>& g) {
    if (a.requires_grad()) {
      if (kind == detail::Broadcast::LeftScalar) t.grad_buffer(a)[0] += detail::sum_all(g);
      else detail::accumulate(t.grad_buffer(a), g);
    }
    if (b.requires_grad()) {
      if (kind == detail::Broadcast::RightScalar) t.grad_buffer(b)[0] += detail::sum_all(g);
      else detail::accumulate(t.grad_buffer(b), g);
    }
  });
}

template <Real T>
Var<T> sub(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "sub");
  Tensor<T> out(kind == detail::Broadcast::LeftScalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = kind == detail::Broadcast::LeftScalar ? av[0] : av[i];
    const T y = kind == detail::Broadcast::RightScalar ? bv[0] : bv[i];
    out[i] = x - y;
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, kind](Tape<T>& t, const Tensor<T>& g) {
    if (a.requires_grad()) {
      if (kind == detail::Broadcast::LeftScalar) t.grad_buffer(a)[0] += detail::sum_all(g);
      else detail::accumulate(t.grad_buffer(a), g);
    }
    if (b.requires_grad()) {
      if (kind == detail::Broadcast::RightScalar) t.grad_buffer(b)[0] -= detail::sum_all(g);
      else detail::accumulate_scaled(t.grad_buffer(b), g, T(-1));
    }
  });
}

template <Real T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "mul");
  Tensor<T> out(kind == detail::Broadcast::LeftScalar ? bv.shape() : av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = kind == detail::Broadcast::LeftScalar ? av[0] : av[i];
    const T y = kind == detail::Broadcast::RightScalar ? bv[0] : bv[i];
    out[i] = x * y;
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, kind](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (a.requires_grad()) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = kind == detail::Broadcast::RightScalar ? bv[0] : bv[i];
        ga[kind == detail::Broadcast::LeftScalar ? 0 : i] += g[i] * y;
      }
    }
    if (b.requires_grad()) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = kind == detail::Broadcast::LeftScalar ? av[0] : av[i];
        gb[kind == detail::Broadcast::RightScalar ? 0 : i] += g[i] * x;
      }
    }
  });
}

template <Real T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& t, const Tensor<T>& g) {
    detail::accumulate_scaled(t.grad_buffer(a), g, s);
  });
}

template <Real T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v += s;
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    detail::accumulate(t.grad_buffer(a), g);
  });
}

template <Real T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <Real T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <Real T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

// ----------------------------------------------------------------- unary ---

/// y = f(x) elementwise; df(x, y) gives dy/dx.
template <Real T, class F, class D>
Var<T> unary(Var<T> a, F f, D df) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t out_id = a.tape->size();
  return a.tape->record(std::move(out), {a}, [a, out_id, df](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = a.value();
    const auto& y = t.value(Var<T>{&t, out_id});
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

template <Real T>
Var<T> neg(Var<T> a) { return scale(a, T(-1)); }

template <Real T>
Var<T> exp(Var<T> a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <Real T>
Var<T> softplus(Var<T> a) {
  return unary(a, [](T x) { return detail::softplus(x); }, [](T x, T) { return detail::sigmoid(x); });
}

template <Real T>
Var<T> sigmoid(Var<T> a) {
  return unary(a, [](T x) { return detail::sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <Real T>
Var<T> silu(Var<T> a) {
  return unary(
      a, [](T x) { return x * detail::sigmoid(x); },
      [](T x, T) {
        const T s = detail::sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

/// Exact (erf-based) GELU.
template <Real T>
Var<T> gelu(Var<T> a) {
  return unary(a, [](T x) { return detail::gelu(x); }, [](T x, T) { return detail::gelu_grad(x); });
}

template <Real T>
Var<T> square(Var<T> a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ------------------------------------------------------------ reductions ---

template <Real T>
Var<T> sum(Var<T> a) {
  const T s = detail::sum_all(a.value());
  return a.tape->record(Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_buffer(a);
    for (auto& v : ga.data()) v += g[0];
  });
}

template <Real T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

/// Weighted sum Σ w·a with a constant weight tensor.
template <Real T>
Var<T> dot_const(Var<T> a, const Tensor<T>& w) {
  require_shape(w.shape(), a.shape(), "dot_const");
  T s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  return a.tape->record(Tensor<T>::scalar(s), {a}, [a, w](Tape<T>& t, const Tensor<T>& g) {
    detail::accumulate_scaled(t.grad_buffer(a), w, g[0]);
  });
}

/// Mean over axis 1 of a [B, L, C] tensor, giving [B, C].
template <Real T>
Var<T> mean_tokens(Var<T> x) {
  const auto& xv = x.value();
  require_rank(xv.shape(), 3, "mean_tokens");
  const std::size_t B = xv.dim(0), L = xv.dim(1), C = xv.dim(2);
  Tensor<T> out({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c) out[b * C + c] += xv[(b * L + l) * C + c];
  for (auto& v : out.data()) v /= static_cast<T>(L);
  return x.tape->record(std::move(out), {x}, [x, B, L, C](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_buffer(x);
    const T inv = T(1) / static_cast<T>(L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t c = 0; c < C; ++c) gx[(b * L + l) * C + c] += g[b * C + c] * inv;
  });
}

// ---------------------------------------------------------------- linalg ---

/// c[i,j] = Σ_k a[i,k]·b[k,j].
template <Real T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(av.shape()) + " by " + to_string(bv.shape()));
  }
  const std::size_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  Tensor<T> out({M, N});
  gemm<T>(false, false, M, N, K, T(1), av.ptr(), K, bv.ptr(), N, T(0), out.ptr(), N);
  return a.tape->record(std::move(out), {a, b}, [a, b, M, K, N](Tape<T>& t, const Tensor<T>& g) {
    if (a.requires_grad())
      gemm<T>(false, true, M, K, N, T(1), g.ptr(), N, b.value().ptr(), N, T(1), t.grad_buffer(a).ptr(), K);
    if (b.requires_grad())
      gemm<T>(true, false, K, N, M, T(1), a.value().ptr(), K, g.ptr(), N, T(1), t.grad_buffer(b).ptr(), N);
  });
}

/// y[..., n] = Σ_k x[..., k]·w[n, k] + bias[n]. Pass bias = nullptr-equivalent
/// by using the overload without it.
template <Real T>
Var<T> linear(Var<T> x, Var<T> w, const std::type_identity_t<Var<T>>* bias) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(wv.shape(), 2, "linear weight");
  const std::size_t K = wv.dim(1), N = wv.dim(0);
  if (xv.rank() == 0 || xv.shape().back() != K) {
    throw DimensionError("linear: input " + to_string(xv.shape()) + " incompatible with weight " +
                         to_string(wv.shape()));
  }
  if (bias) require_shape(bias->shape(), Shape{N}, "linear bias");
  const std::size_t M = xv.size() / K;
  Shape os = xv.shape();
  os.back() = N;
  Tensor<T> out(os);
  if (bias) {
    const auto& bv = bias->value();
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) out[i * N + j] = bv[j];
  }
  gemm<T>(false, true, M, N, K, T(1), xv.ptr(), K, wv.ptr(), K, bias ? T(1) : T(0), out.ptr(), N);
  std::vector<Var<T>> parents{x, w};
  const bool has_bias = bias != nullptr;
  const Var<T> bvar = has_bias ? *bias : Var<T>{};
  if (has_bias) parents.push_back(bvar);
  return x.tape->record(std::move(out), parents, [x, w, bvar, has_bias, M, K, N](Tape<T>& t, const Tensor<T>& g) {
    if (x.requires_grad())
      gemm<T>(false, false, M, K, N, T(1), g.ptr(), N, w.value().ptr(), K, T(1), t.grad_buffer(x).ptr(), K);
    if (w.requires_grad())
      gemm<T>(true, false, N, K, M, T(1), g.ptr(), N, x.value().ptr(), K, T(1), t.grad_buffer(w).ptr(), K);
    if (has_bias && bvar.requires_grad()) {
      auto& gb = t.grad_buffer(bvar);
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) gb[j] += g[i * N + j];
    }
  });
}

template <Real T>
Var<T> linear(Var<T> x, Var<T> w) {
  return linear<T>(x, w, nullptr);
}

template <Real T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return linear<T>(x, w, &b);
}

/// y[..., c] = x[..., c]·v[c].
template <Real T>
Var<T> mul_lastdim(Var<T> x, Var<T> v) {
  const auto& xv = x.value();
  const auto& vv = v.value();
  require_rank(vv.shape(), 1, "mul_lastdim vector");
  const std::size_t C = vv.dim(0);
  if (xv.rank() == 0 || xv.shape().back() != C)
    throw DimensionError("mul_lastdim: " + to_string(xv.shape()) + " vs " + to_string(vv.shape()));
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * vv[i % C];
  return x.tape->record(std::move(out), {x, v}, [x, v, C](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& vv = v.value();
    if (x.requires_grad()) {
      auto& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * vv[i % C];
    }
    if (v.requires_grad()) {
      auto& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % C] += g[i] * xv[i];
    }
  });
}

/// y[..., c] = x[..., c] + v[c].
template <Real T>
Var<T> add_lastdim(Var<T> x, Var<T> v) {
  const auto& xv = x.value();
  const auto& vv = v.value();
  require_rank(vv.shape(), 1, "add_lastdim vector");
  const std::size_t C = vv.dim(0);
  if (xv.rank() == 0 || xv.shape().back() != C)
    throw DimensionError("add_lastdim: " + to_string(xv.shape()) + " vs " + to_string(vv.shape()));
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + vv[i % C];
  return x.tape->record(std::move(out), {x, v}, [x, v, C](Tape<T>& t, const Tensor<T>& g) {
    if (x.requires_grad()) detail::accumulate(t.grad_buffer(x), g);
    if (v.requires_grad()) {
      auto& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % C] += g[i];
    }
  });
}

/// Normalises over the last axis, then applies gamma/beta.
template <Real T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  if (!(eps > T(0))) throw ValidationError("layer_norm: eps must be positive");
  const auto& xv = x.value();
  const std::size_t C = gamma.value().size();
  require_shape(gamma.shape(), Shape{C}, "layer_norm gamma");
  require_shape(beta.shape(), Shape{C}, "layer_norm beta");
  if (xv.rank() == 0 || xv.shape().back() != C)
    throw DimensionError("layer_norm: input " + to_string(xv.shape()) + " vs channels " + std::to_string(C));
  const std::size_t M = xv.size() / C;
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(M);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < M; ++r) {
    const T* row = xv.ptr() + r * C;
    T mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(C);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (row[c] - mu) * rs;
      xhat[r * C + c] = h;
      out[r * C + c] = h * gv[c] + bv[c];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, C, M, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
        const auto& gv = gamma.value();
        if (gamma.requires_grad() || beta.requires_grad()) {
          Tensor<T>* gg = gamma.requires_grad() ? &t.grad_buffer(gamma) : nullptr;
          Tensor<T>* gb = beta.requires_grad() ? &t.grad_buffer(beta) : nullptr;
          for (std::size_t r = 0; r < M; ++r)
            for (std::size_t c = 0; c < C; ++c) {
              if (gg) (*gg)[c] += g[r * C + c] * xhat[r * C + c];
              if (gb) (*gb)[c] += g[r * C + c];
            }
        }
        if (x.requires_grad()) {
          auto& gx = t.grad_buffer(x);
          const T invC = T(1) / static_cast<T>(C);
          for (std::size_t r = 0; r < M; ++r) {
            T s1 = 0, s2 = 0;
            for (std::size_t c = 0; c < C; ++c) {
              const T d = g[r * C + c] * gv[c];
              s1 += d;
              s2 += d * xhat[r * C + c];
            }
            s1 *= invC;
            s2 *= invC;
            for (std::size_t c = 0; c < C; ++c) {
              const T d = g[r * C + c] * gv[c];
              gx[r * C + c] += rstd[r] * (d - s1 - xhat[r * C + c] * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------- layout ---

template <Real T>
Var<T> reshape(Var<T> a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    detail::accumulate(t.grad_buffer(a), g);
  });
}

/// [B, C, H, W] -> [B, H, W, C].
template <Real T>
Var<T> nchw_to_nhwc(Var<T> a) {
  const auto& v = a.value();
  require_rank(v.shape(), 4, "nchw_to_nhwc");
  const std::size_t B = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  Tensor<T> out({B, H, W, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p) out[(b * H * W + p) * C + c] = v[(b * C + c) * H * W + p];
  return a.tape->record(std::move(out), {a}, [a, B, C, H, W](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < H * W; ++p) ga[(b * C + c) * H * W + p] += g[(b * H * W + p) * C + c];
  });
}

/// [B, H, W, C] -> [B, C, H, W].
template <Real T>
Var<T> nhwc_to_nchw(Var<T> a) {
  const auto& v = a.value();
  require_rank(v.shape(), 4, "nhwc_to_nchw");
  const std::size_t B = v.dim(0), H = v.dim(1), W = v.dim(2), C = v.dim(3);
  Tensor<T> out({B, C, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * H * W + p] = v[(b * H * W + p) * C + c];
  return a.tape->record(std::move(out), {a}, [a, B, C, H, W](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < H * W; ++p)
        for (std::size_t c = 0; c < C; ++c) ga[(b * H * W + p) * C + c] += g[(b * C + c) * H * W + p];
  });
}

/// Channels [begin, end) of the last axis.
template <Real T>
Var<T> slice_lastdim(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& v = a.value();
  const std::size_t C = v.shape().back();
  if (begin >= end || end > C)
    throw DimensionError("slice_lastdim: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         to_string(v.shape()));
  const std::size_t M = v.size() / C, w = end - begin;
  Shape s = v.shape();
  s.back() = w;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < M; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = v[r * C + begin + c];
  return a.tape->record(std::move(out), {a}, [a, M, C, w, begin](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t c = 0; c < w; ++c) ga[r * C + begin + c] += g[r * w + c];
  });
}

template <Real T>
Var<T> concat_lastdim(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_lastdim: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    const std::size_t w = s.back();
    s.pop_back();
    if (s != lead) throw DimensionError("concat_lastdim: leading shape mismatch " + to_string(p.shape()));
    widths.push_back(w);
    total += w;
  }
  const std::size_t M = numel(lead);
  Shape os = lead;
  os.push_back(total);
  Tensor<T> out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * total + off + c] = v[r * widths[k] + c];
    off += widths[k];
  }
  return parts[0].tape->record(std::move(out), parts, [parts, widths, M, total](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (parts[k].requires_grad()) {
        auto& gp = t.grad_buffer(parts[k]);
        for (std::size_t r = 0; r < M; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += g[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

/// y[b, ...] = s[b]·x[b, ...] for a constant per-sample factor (stochastic depth).
template <Real T>
Var<T> scale_rows(Var<T> x, std::vector<T> s) {
  const auto& xv = x.value();
  if (xv.rank() == 0 || xv.dim(0) != s.size())
    throw DimensionError("scale_rows: " + to_string(xv.shape()) + " vs " + std::to_string(s.size()) + " factors");
  const std::size_t per = xv.size() / s.size();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * s[i / per];
  return x.tape->record(std::move(out), {x}, [x, s = std::move(s), per](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i / per];
  });
}

}  // namespace vssd::ops
