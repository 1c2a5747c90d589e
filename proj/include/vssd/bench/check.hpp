#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "vssd/core/grad_check.hpp"
#include "vssd/ncssd/autodiff.hpp"
#include "vssd/ncssd/kernels.hpp"
#include "vssd/ssd/autodiff.hpp"
#include "vssd/ssd/reference.hpp"

/// Correctness suites behind `vssd-cli check`. Every instance draws from its
/// own seed so a failure can be reproduced in isolation.
namespace vssd::bench {

enum class Fault {
  None,
  MaskSign,  // flips the sign of one sub-diagonal entry of the mask before it is checked
};

struct CheckOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 50;
  Fault fault = Fault::None;
};

struct SuiteResult {
  std::string name;
  bool passed = true;
  double worst_error = 0;
  double tolerance = 0;  // of the check that produced worst_error
  std::string worst_check;
  std::size_t instances = 0;
  std::string failure;  // first failing check, with its instance seed
};

inline std::uint64_t instance_seed(std::uint64_t seed, std::size_t i) {
  return seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL * (i + 1);
}

namespace detail {

struct Recorder {
  SuiteResult r;
  std::uint64_t current_seed = 0;

  void check(const std::string& what, double err, double tol) {
    const bool ok = err <= tol;
    if (r.worst_check.empty() || !(err <= r.worst_error)) {
      r.worst_error = err;
      r.tolerance = tol;
      r.worst_check = what;
    }
    if (!ok && r.passed) {
      r.passed = false;
      std::ostringstream o;
      o << what << ": error " << err << " > " << tol << " (instance seed " << current_seed << ")";
      r.failure = o.str();
    }
  }
};

struct Dims {
  std::size_t L, Hd, P, N;
};

inline Dims draw_dims(Rng& rng, std::size_t max_L, std::size_t min_L = 1) {
  return {min_L + rng.below(max_L - min_L + 1), 1 + rng.below(3), 1 + rng.below(8), 1 + rng.below(16)};
}

inline Tensor<double> decay(Rng& rng, Shape s) {
  Tensor<double> a(std::move(s));
  for (auto& v : a.data()) v = std::exp(-rng.uniform(0.01, 1.5));
  return a;
}

inline ssd::SsdSequenceInputs<double> causal(Rng& rng, Dims d) {
  ssd::SsdSequenceInputs<double> in{random_uniform<double>({d.L, d.Hd, d.P}, rng),
                                    random_uniform<double>({d.L, d.N}, rng), random_uniform<double>({d.L, d.N}, rng),
                                    {}};
  in.A = decay(rng, {d.L, d.Hd});
  return in;
}

inline ncssd::NcssdInputs<double> noncausal(Rng& rng, Dims d) {
  ncssd::NcssdInputs<double> in{random_uniform<double>({d.L, d.Hd, d.P}, rng),
                                random_uniform<double>({d.L, d.N}, rng), random_uniform<double>({d.L, d.N}, rng),
                                {}, {}};
  in.m = decay(rng, {d.L, d.Hd});
  return in;
}

}  // namespace detail

/// Causal forms against each other, the LTI convolution identity, the two
/// NC-SSD forms and the collapse of the rewritten recurrence.
inline SuiteResult suite_equivalence(const CheckOptions& o) {
  detail::Recorder rec;
  rec.r.name = "equivalence";
  for (std::size_t i = 0; i < o.instances; ++i) {
    rec.current_seed = instance_seed(o.seed, i);
    Rng rng(rec.current_seed);
    const auto in = detail::causal(rng, detail::draw_dims(rng, 64));
    const auto yr = ssd::ssd_recurrent(in);
    rec.check("recurrent vs quadratic", max_abs_diff(yr, ssd::ssd_quadratic(in)), 1e-10);
    rec.check("recurrent vs matrix form", max_abs_diff(yr, ssd::apply_matrix_form(ssd::ssd_matrix_form(in), in.X)), 1e-10);

    const std::size_t L = 1 + rng.below(128);
    const double a = std::exp(-rng.uniform(0.01, 1.5));
    ssd::SsdSequenceInputs<double> lti{random_uniform<double>({L, 1, 1}, rng), random_uniform<double>({1, 4}, rng),
                                       random_uniform<double>({1, 4}, rng), Tensor<double>({L, 1}, a)};
    Tensor<double> Bs({L, 4}), Cs({L, 4});
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t n = 0; n < 4; ++n) {
        Bs(t, n) = lti.B(0, n);
        Cs(t, n) = lti.C(0, n);
      }
    const auto K = ssd::lti_conv_kernel(a, lti.B.reshaped({4}), lti.C.reshaped({4}), L);
    const auto yconv = ssd::causal_conv(lti.X.reshaped({L}), K);
    lti.B = Bs;
    lti.C = Cs;
    rec.check("LTI convolution", max_abs_diff(yconv, ssd::ssd_recurrent(lti).reshaped({L})), 1e-12);

    const auto nin = detail::noncausal(rng, detail::draw_dims(rng, 256));
    rec.check("contraction vs fused", max_abs_diff(ncssd::ncssd_contraction(nin), ncssd::ncssd_fused(nin)), 1e-12);
    const auto states = ncssd::ncssd_rewritten_recurrence(nin);
    const std::size_t Ln = nin.length(), per = states.size() / Ln;
    Tensor<double> last(ncssd::ncssd_hidden_state(nin).H.shape());
    std::copy(states.data().begin() + (Ln - 1) * per, states.data().end(), last.data().begin());
    rec.check("rewritten recurrence vs global state", max_abs_diff(last, ncssd::ncssd_hidden_state(nin).H), 1e-12);
  }
  rec.r.instances = o.instances;
  return rec.r;
}

/// NC-SSD under scan routes: outputs follow the permutation and the hidden
/// state is bitwise unchanged.
inline SuiteResult suite_invariance(const CheckOptions& o) {
  detail::Recorder rec;
  rec.r.name = "invariance";
  for (std::size_t i = 0; i < o.instances; ++i) {
    rec.current_seed = instance_seed(o.seed, i);
    Rng rng(rec.current_seed);
    const std::size_t Hs = 1 + rng.below(8), Ws = 1 + rng.below(8);
    auto d = detail::draw_dims(rng, 1);
    d.L = Hs * Ws;
    const auto in = detail::noncausal(rng, d);
    const auto y = ncssd::ncssd_fused(in);
    const auto H0 = ncssd::ncssd_hidden_state(in).H;
    for (const auto& r : {ncssd::ScanRoute::identity(d.L), ncssd::ScanRoute::reversed(d.L),
                          ncssd::ScanRoute::column_major(Hs, Ws), ncssd::ScanRoute::transpose_raster(Hs, Ws),
                          ncssd::ScanRoute::random(d.L, rng)}) {
      const auto routed = ncssd::apply_scan_route(in, r);
      rec.check(r.name + " equivariance", max_abs_diff(ncssd::ncssd_fused(routed), ncssd::permute_tokens(y, r)), 1e-12);
      rec.check(r.name + " hidden state", max_abs_diff(ncssd::ncssd_hidden_state(routed).H, H0), 0.0);
    }
  }
  rec.r.instances = o.instances;
  return rec.r;
}

/// The cumulative-product mask against directly formed products, plus its
/// structure: unit diagonal, zero above, entries in [0, 1].
inline SuiteResult suite_mask(const CheckOptions& o) {
  detail::Recorder rec;
  rec.r.name = "mask";
  for (std::size_t i = 0; i < o.instances; ++i) {
    rec.current_seed = instance_seed(o.seed, i);
    Rng rng(rec.current_seed);
    const auto d = detail::draw_dims(rng, 64, 2);
    const auto A = detail::decay(rng, {d.L, d.Hd});
    auto M = ssd::build_mask_M(A);
    if (o.fault == Fault::MaskSign) M(0, 1, 0) = -M(0, 1, 0);
    double prod_err = 0, structure = 0;
    for (std::size_t h = 0; h < d.Hd; ++h)
      for (std::size_t r = 0; r < d.L; ++r)
        for (std::size_t c = 0; c < d.L; ++c) {
          double expect = 0;
          if (c <= r) {
            expect = 1;
            for (std::size_t k = c + 1; k <= r; ++k) expect *= A(k, h);
          }
          const double v = M(h, r, c);
          prod_err = std::max(prod_err, std::abs(v - expect) / std::max(1.0, std::abs(expect)));
          if (c > r) structure = std::max(structure, std::abs(v));
          if (c == r) structure = std::max(structure, std::abs(v - 1));
          if (v < 0) structure = std::max(structure, -v);
          if (v > 1) structure = std::max(structure, v - 1);
        }
    rec.check("mask vs direct products", prod_err, 1e-13);
    rec.check("mask structure", structure, 0.0);
  }
  rec.r.instances = o.instances;
  return rec.r;
}

/// Finite-difference checks of the differentiable kernels at h = 1e-5.
inline SuiteResult suite_gradient(const CheckOptions& o) {
  detail::Recorder rec;
  rec.r.name = "gradient";
  const std::size_t n = std::max<std::size_t>(1, o.instances / 10);
  using Kernel = std::function<Var<double>(Var<double>, Var<double>, Var<double>, Var<double>)>;
  const std::vector<std::pair<std::string, Kernel>> kernels{
      {"ncssd_fused", [](auto X, auto B, auto C, auto m) { return ncssd::ncssd_fused(X, B, C, m); }},
      {"ncssd_contraction", [](auto X, auto B, auto C, auto m) { return ncssd::ncssd_contraction(X, B, C, m); }},
      {"ssd_scan", [](auto X, auto B, auto C, auto A) { return ssd::ssd_scan(X, B, C, A); }},
      {"bi_ssd_scan", [](auto X, auto B, auto C, auto A) { return ssd::bi_ssd_scan(X, B, C, A); }}};
  for (std::size_t i = 0; i < n; ++i) {
    rec.current_seed = instance_seed(o.seed, i);
    Rng rng(rec.current_seed);
    const std::size_t Bt = 1 + rng.below(2), L = 1 + rng.below(8), Hd = 1 + rng.below(2), P = 2 * (1 + rng.below(2)),
                      N = 1 + rng.below(4);
    Tensor<double> X = random_uniform<double>({Bt, L, Hd, P}, rng), B = random_uniform<double>({Bt, L, N}, rng),
                   C = random_uniform<double>({Bt, L, N}, rng), A = detail::decay(rng, {Bt, L, Hd}),
                   W = random_uniform<double>({Bt, L, Hd, P}, rng);
    for (const auto& [name, k] : kernels) {
      const auto r = grad_check(
          [&](Tape<double>&, const std::vector<Var<double>>& v) { return ops::dot_const(k(v[0], v[1], v[2], v[3]), W); },
          {&X, &B, &C, &A});
      rec.check(name, r.max_rel_error, 1e-5);
    }
  }
  rec.r.instances = n;
  return rec.r;
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"equivalence", "invariance", "mask", "gradient"};
  return names;
}

/// Suites a benchmark variant must pass before it is timed.
inline std::vector<std::string> suites_for_variant(const std::string& v) {
  if (v == "ssd" || v == "bi-ssd") return {"equivalence", "mask", "gradient"};
  return {"equivalence", "invariance", "gradient"};
}

inline SuiteResult run_suite(const std::string& name, const CheckOptions& o) {
  if (name == "equivalence") return suite_equivalence(o);
  if (name == "invariance") return suite_invariance(o);
  if (name == "mask") return suite_mask(o);
  if (name == "gradient") return suite_gradient(o);
  throw ConfigError("unknown check suite '" + name + "'");
}

}  // namespace vssd::bench
