#pragma once

#include "vssd/core/rng.hpp"
#include "vssd/ncssd/kernels.hpp"
#include "vssd/ssd/reference.hpp"

namespace vssd::testing {

struct InstanceDims {
  std::size_t L, Hd, P, N;
};

inline InstanceDims random_dims(Rng& rng, std::size_t max_L, std::size_t max_N, std::size_t max_P, std::size_t max_Hd = 3) {
  return {1 + rng.below(max_L), 1 + rng.below(max_Hd), 1 + rng.below(max_P), 1 + rng.below(max_N)};
}

/// A drawn as exp(−Δ·exp(a)) with moderate Δ, so it lands inside (0, 1).
template <Real T>
ssd::SsdSequenceInputs<T> random_ssd(Rng& rng, InstanceDims d) {
  ssd::SsdSequenceInputs<T> in{random_uniform<T>({d.L, d.Hd, d.P}, rng), random_uniform<T>({d.L, d.N}, rng),
                               random_uniform<T>({d.L, d.N}, rng), Tensor<T>({d.L, d.Hd})};
  for (auto& a : in.A.data()) a = static_cast<T>(std::exp(-rng.uniform(0.01, 1.5)));
  return in;
}

template <Real T>
ncssd::NcssdInputs<T> random_ncssd(Rng& rng, InstanceDims d) {
  ncssd::NcssdInputs<T> in{random_uniform<T>({d.L, d.Hd, d.P}, rng), random_uniform<T>({d.L, d.N}, rng),
                           random_uniform<T>({d.L, d.N}, rng), Tensor<T>({d.L, d.Hd}), {}};
  for (auto& a : in.m.data()) a = static_cast<T>(std::exp(-rng.uniform(0.01, 1.5)));
  return in;
}

/// Lifts one sequence to a batch of one: [L, ...] -> [1, L, ...].
template <Real T>
Tensor<T> batch1(const Tensor<T>& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshaped(s);
}

}  // namespace vssd::testing
