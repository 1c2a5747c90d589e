#pragma once

#include <string>
#include <vector>

#include "vssd/core/rng.hpp"
#include "vssd/core/tensor.hpp"

namespace vssd::ncssd {

/// A flattening order for L tokens: position k of the routed sequence holds
/// source token order[k].
struct ScanRoute {
  std::string name;
  std::vector<std::size_t> order;

  std::size_t size() const { return order.size(); }

  void validate() const {
    std::vector<char> seen(order.size(), 0);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t i = order[k];
      if (i >= order.size() || seen[i]) {
        throw ValidationError("scan route '" + name + "' is not a bijection over 0.." +
                              std::to_string(order.size() == 0 ? 0 : order.size() - 1) + " (position " +
                              std::to_string(k) + " -> " + std::to_string(i) + ")");
      }
      seen[i] = 1;
    }
  }

  ScanRoute inverse() const {
    validate();
    ScanRoute r{name + "^-1", std::vector<std::size_t>(order.size())};
    for (std::size_t k = 0; k < order.size(); ++k) r.order[order[k]] = k;
    return r;
  }

  /// Applying the result equals applying `first`, then this route.
  ScanRoute after(const ScanRoute& first) const {
    if (first.size() != size()) throw DimensionError("scan route composition: length mismatch");
    ScanRoute r{name + "*" + first.name, std::vector<std::size_t>(order.size())};
    for (std::size_t k = 0; k < order.size(); ++k) r.order[k] = first.order[order[k]];
    return r;
  }

  static ScanRoute identity(std::size_t L) {
    ScanRoute r{"identity", std::vector<std::size_t>(L)};
    for (std::size_t k = 0; k < L; ++k) r.order[k] = k;
    return r;
  }

  static ScanRoute reversed(std::size_t L) {
    ScanRoute r{"reverse", std::vector<std::size_t>(L)};
    for (std::size_t k = 0; k < L; ++k) r.order[k] = L - 1 - k;
    return r;
  }

  /// Row-major H×W grid read column by column.
  static ScanRoute column_major(std::size_t H, std::size_t W) {
    ScanRoute r{"column-major", {}};
    r.order.reserve(H * W);
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t row = 0; row < H; ++row) r.order.push_back(row * W + c);
    return r;
  }

  /// Columns read alternately top-down and bottom-up (boustrophedon over the
  /// transposed grid), so consecutive tokens stay spatially adjacent.
  static ScanRoute transpose_raster(std::size_t H, std::size_t W) {
    ScanRoute r{"transpose-raster", {}};
    r.order.reserve(H * W);
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t k = 0; k < H; ++k) {
        const std::size_t row = (c % 2 == 0) ? k : H - 1 - k;
        r.order.push_back(row * W + c);
      }
    return r;
  }

  static ScanRoute random(std::size_t L, Rng& rng) { return {"random", rng.permutation(L)}; }
};

/// Reorders axis `axis` of t by the route: out[..., k, ...] = t[..., order[k], ...].
template <Real T>
Tensor<T> permute_tokens(const Tensor<T>& t, const ScanRoute& r, std::size_t axis = 0) {
  r.validate();
  if (t.dim(axis) != r.size()) {
    throw DimensionError("permute_tokens: route length " + std::to_string(r.size()) + " vs axis extent " +
                         std::to_string(t.dim(axis)));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
  const std::size_t L = r.size();
  Tensor<T> out(t.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < L; ++k) {
      const T* src = t.ptr() + (o * L + r.order[k]) * inner;
      std::copy(src, src + inner, out.ptr() + (o * L + k) * inner);
    }
  return out;
}

}  // namespace vssd::ncssd
