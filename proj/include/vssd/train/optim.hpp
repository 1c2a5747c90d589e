#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vssd/core/tape.hpp"
#include "vssd/model/params.hpp"

namespace vssd::train {

/// Raised when a loss or gradient stops being finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.05;
};

/// AdamW with decoupled decay: θ ← θ − lr·wd·θ, then θ ← θ − lr·m̂/(√v̂ + ε).
/// Parameters flagged decay = false skip the first step.
template <Real T>
class AdamW {
 public:
  AdamW(const model::ParamSet<T>& params, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  std::size_t steps() const { return t_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

  void step(model::ParamSet<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
    if (grads.size() != params.size() || m_.size() != params.size()) {
      throw DimensionError("adamw: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                           " parameters");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      require_shape(grads[i].shape(), params[i].value.shape(), "adamw gradient");
      for (T g : grads[i].data())
        if (!std::isfinite(g)) throw DivergenceError("non-finite gradient for " + params[i].name);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto& p = params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads[i];
      const double shrink = p.decay ? lr * cfg_.weight_decay : 0.0;
      for (std::size_t k = 0; k < g.size(); ++k) {
        m[k] = T(cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k]);
        v[k] = T(cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * double(g[k]) * g[k]);
        const double mh = m[k] / bc1, vh = v[k] / bc2;
        double x = p.value[k];
        if (shrink != 0.0) x -= shrink * x;
        x -= lr * mh / (std::sqrt(vh) + cfg_.eps);
        p.value[k] = T(x);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Linear warmup from 0 to peak, then half-cosine decay to 0 at total_steps.
inline double cosine_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak) {
  if (warmup_steps > 0 && step < warmup_steps) return peak * double(step) / double(warmup_steps);
  if (step >= total_steps) return 0.0;
  if (total_steps <= warmup_steps) return peak;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Mean cross-entropy of logits [B, K] against (1−eps)·onehot + eps/K.
template <Real T>
Var<T> label_smoothing_ce(Var<T> logits, const std::vector<std::size_t>& labels, double eps = 0.1) {
  const auto& z = logits.value();
  require_rank(z.shape(), 2, "label_smoothing_ce logits");
  const std::size_t B = z.dim(0), K = z.dim(1);
  if (labels.size() != B) throw DimensionError("label_smoothing_ce: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(B));
  if (!(eps >= 0.0 && eps < 1.0)) throw ParameterDomainError("label smoothing must lie in [0, 1)");
  Tensor<T> probs({B, K});
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) throw ValidationError("label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(K) + ")");
    const T* row = z.ptr() + b * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, double(row[k]));
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(double(row[k]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) {
      const double logp = double(row[k]) - lse;
      const double target = eps / double(K) + (k == labels[b] ? 1.0 - eps : 0.0);
      loss -= target * logp;
      probs[b * K + k] = T(std::exp(logp));
    }
  }
  return logits.tape->record(Tensor<T>::scalar(T(loss / double(B))), {logits},
                             [logits, labels, eps, B, K, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
                               auto& gz = t.grad_buffer(logits);
                               const double s = double(g[0]) / double(B);
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t k = 0; k < K; ++k) {
                                   const double target = eps / double(K) + (k == labels[b] ? 1.0 - eps : 0.0);
                                   gz[b * K + k] += T(s * (double(probs[b * K + k]) - target));
                                 }
                             });
}

/// Exponential moving average of the parameters: shadow ← d·shadow + (1−d)·θ.
template <Real T>
class Ema {
 public:
  Ema(const model::ParamSet<T>& params, double decay) : decay_(decay) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw ParameterDomainError("EMA decay must lie in [0, 1]");
    for (const auto& p : params) shadow_.push_back(p.value);
  }

  void update(const model::ParamSet<T>& params) {
    if (params.size() != shadow_.size()) throw DimensionError("ema: parameter count changed");
    for (std::size_t i = 0; i < shadow_.size(); ++i) {
      const auto& p = params[i].value;
      require_shape(p.shape(), shadow_[i].shape(), "ema parameter");
      auto& s = shadow_[i];
      for (std::size_t k = 0; k < p.size(); ++k) s[k] = T(decay_ * s[k] + (1.0 - decay_) * p[k]);
    }
  }

  double decay() const { return decay_; }
  const std::vector<Tensor<T>>& shadow() const { return shadow_; }

  /// Copies the shadow values into a parameter set of the same layout.
  void copy_to(model::ParamSet<T>& params) const {
    for (std::size_t i = 0; i < shadow_.size(); ++i) params[i].value = shadow_[i];
  }

 private:
  double decay_;
  std::vector<Tensor<T>> shadow_;
};

}  // namespace vssd::train
