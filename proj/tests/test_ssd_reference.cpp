#include <catch_amalgamated.hpp>

#include "support.hpp"
#include "vssd/core/grad_check.hpp"
#include "vssd/core/ops.hpp"
#include "vssd/ssd/autodiff.hpp"

using namespace vssd;
using namespace vssd::ssd;
using vssd::testing::random_dims;
using vssd::testing::random_ssd;
using Catch::Matchers::WithinAbs;

namespace {

SsdSequenceInputs<double> scalar_instance(std::vector<double> x, std::vector<double> b, std::vector<double> c,
                                          std::vector<double> a) {
  const std::size_t L = x.size();
  return {Tensor<double>({L, 1, 1}, x), Tensor<double>({L, 1}, b), Tensor<double>({L, 1}, c), Tensor<double>({L, 1}, a)};
}

}  // namespace

TEST_CASE("discretize_zoh values") {
  ContinuousParams<double> p{{-1.0}, Tensor<double>({3, 2}, {1, 2, 1, 2, 1, 2}),
                             Tensor<double>({3, 1}, {0.0, std::log(2.0), 0.5})};
  auto d = discretize_zoh(p);
  CHECK(d.A(0, 0) == 1.0);
  CHECK_THAT(d.A(1, 0), WithinAbs(0.5, 1e-15));
  CHECK(d.B(2, 0, 0) == 0.5);
  CHECK(d.B(2, 0, 1) == 1.0);

  // Exact ZOH factor (e^{ΔÅ} − 1)/Å against its closed form.
  auto e = discretize_zoh(p, ZohMode::Exact);
  CHECK_THAT(e.B(2, 0, 0), WithinAbs(1.0 - std::exp(-0.5), 1e-15));

  ContinuousParams<double> bad{{0.0}, Tensor<double>({1, 1}), Tensor<double>({1, 1})};
  CHECK_THROWS_AS(discretize_zoh(bad), ParameterDomainError);
}

TEST_CASE("ssd_recurrent hand cases") {
  auto in = scalar_instance({1, 2}, {1, 1}, {1, 1}, {0.9, 0.5});
  auto y = ssd_recurrent(in);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 2.5);
  CHECK(ssd_quadratic(in).storage() == std::vector<double>{1.0, 2.5});

  auto acc = scalar_instance({3, -1, 4, 1, 5}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1});
  CHECK(ssd_recurrent(acc).storage() == std::vector<double>{3, 2, 6, 7, 12});
}

TEST_CASE("build_mask_M") {
  Tensor<double> A({3, 1}, {0.7, 0.5, 0.25});
  auto M = build_mask_M(A);
  const std::vector<double> want{1, 0, 0, 0.5, 1, 0, 0.125, 0.25, 1};
  CHECK(M.storage() == want);

  auto ones = build_mask_M(Tensor<double>({4, 1}, 1.0));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(ones(0, i, j) == (j <= i ? 1.0 : 0.0));

  Rng rng(3);
  auto in = random_ssd<double>(rng, {20, 3, 1, 1});
  auto R = build_mask_M(in.A);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t i = 0; i < 20; ++i) {
      CHECK(R(h, i, i) == 1.0);
      for (std::size_t j = i + 1; j < 20; ++j) CHECK(R(h, i, j) == 0.0);
      for (std::size_t j = 0; j < i; ++j) CHECK(R(h, i, j) == R(h, i, j + 1) * in.A(j + 1, h));
    }
}

TEST_CASE("three causal forms agree") {
  Rng rng(2024);
  for (int it = 0; it < 60; ++it) {
    auto in = random_ssd<double>(rng, random_dims(rng, 64, 16, 8));
    auto yr = ssd_recurrent(in);
    CHECK(max_abs_diff(yr, ssd_quadratic(in)) < 1e-10);
    auto F = ssd_matrix_form(in);
    CHECK(max_abs_diff(yr, apply_matrix_form(F, in.X)) < 1e-10);

    // F = M ⊙ (C Bᵀ) entrywise.
    auto M = build_mask_M(in.A);
    double worst = 0;
    for (std::size_t h = 0; h < in.heads(); ++h)
      for (std::size_t j = 0; j < in.length(); ++j)
        for (std::size_t i = 0; i < in.length(); ++i) {
          double cb = 0;
          for (std::size_t n = 0; n < in.state(); ++n) cb += in.C(j, n) * in.B(i, n);
          worst = std::max(worst, std::abs(F(h, j, i) - M(h, j, i) * cb));
        }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("single token: every form is (C·B) x") {
  Rng rng(5);
  auto in = random_ssd<double>(rng, {1, 2, 4, 4});
  double cb = 0;
  for (std::size_t n = 0; n < 4; ++n) cb += in.C(0, n) * in.B(0, n);
  auto F = ssd_matrix_form(in);
  CHECK_THAT(F(0, 0, 0), WithinAbs(cb, 1e-15));
  for (const auto& y : {ssd_recurrent(in), ssd_quadratic(in), bi_ssd(in)})
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t p = 0; p < 4; ++p) CHECK_THAT(y(0, h, p), WithinAbs(cb * in.X(0, h, p), 1e-14));
}

TEST_CASE("LTI kernel and convolution") {
  auto K = lti_conv_kernel(0.5, Tensor<double>({1}, 1.0), Tensor<double>({1}, 1.0), 3);
  CHECK(K.storage() == std::vector<double>{1, 0.5, 0.25});
  Tensor<double> b({2}, {0.3, 2.0}), c({2}, {1.5, -1.0});
  auto K0 = lti_conv_kernel(0.0, b, c, 4);
  CHECK_THAT(K0[0], WithinAbs(0.45 - 2.0, 1e-15));
  for (std::size_t k = 1; k < 4; ++k) CHECK(K0[k] == 0.0);

  Rng rng(8);
  for (std::size_t L : {1, 7, 64, 128}) {
    const double a = rng.uniform(0.05, 0.99);
    auto B = random_uniform<double>({4}, rng), C = random_uniform<double>({4}, rng), x = random_uniform<double>({L}, rng);
    SsdSequenceInputs<double> in{x.reshaped({L, 1, 1}), Tensor<double>({L, 4}), Tensor<double>({L, 4}),
                                 Tensor<double>({L, 1}, a)};
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t n = 0; n < 4; ++n) {
        in.B(t, n) = B[n];
        in.C(t, n) = C[n];
      }
    auto y = causal_conv(x, lti_conv_kernel(a, B, C, L));
    CHECK(max_abs_diff(y, ssd_recurrent(in).reshaped({L})) < 1e-12);
  }
}

TEST_CASE("bi_ssd") {
  Rng rng(13);
  auto odd = random_ssd<double>(rng, {4, 1, 3, 2});
  CHECK_THROWS_AS(bi_ssd(odd), UnsupportedConfiguration);

  SECTION("matches two explicit scans") {
    auto in = random_ssd<double>(rng, {17, 2, 6, 5});
    auto y = bi_ssd(in);
    Tensor<double> xf({17, 2, 3}), xb({17, 2, 3});
    for (std::size_t t = 0; t < 17; ++t)
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t p = 0; p < 3; ++p) {
          xf(t, h, p) = in.X(t, h, p);
          xb(16 - t, h, p) = in.X(t, h, p + 3);
        }
    Tensor<double> Br({17, 5}), Cr({17, 5}), Ar({17, 2});
    for (std::size_t t = 0; t < 17; ++t) {
      for (std::size_t n = 0; n < 5; ++n) {
        Br(16 - t, n) = in.B(t, n);
        Cr(16 - t, n) = in.C(t, n);
      }
      for (std::size_t h = 0; h < 2; ++h) Ar(16 - t, h) = in.A(t, h);
    }
    auto yf = ssd_recurrent(SsdSequenceInputs<double>{xf, in.B, in.C, in.A});
    auto yb = ssd_recurrent(SsdSequenceInputs<double>{xb, Br, Cr, Ar});
    double worst = 0;
    for (std::size_t t = 0; t < 17; ++t)
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t p = 0; p < 3; ++p) {
          worst = std::max(worst, std::abs(y(t, h, p) - yf(t, h, p)));
          worst = std::max(worst, std::abs(y(t, h, p + 3) - yb(16 - t, h, p)));
        }
    CHECK(worst < 1e-12);
  }

  SECTION("palindromic inputs mirror between halves") {
    const std::size_t L = 9;
    auto in = random_ssd<double>(rng, {L, 1, 4, 3});
    for (std::size_t t = 0; t < L / 2; ++t) {
      const std::size_t u = L - 1 - t;
      for (std::size_t n = 0; n < 3; ++n) {
        in.B(u, n) = in.B(t, n);
        in.C(u, n) = in.C(t, n);
      }
      in.A(u, 0) = in.A(t, 0);
      for (std::size_t p = 0; p < 4; ++p) in.X(u, 0, p) = in.X(t, 0, p);
    }
    // Same content in both halves, so the backward half is the mirror image.
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t p = 0; p < 2; ++p) in.X(t, 0, p + 2) = in.X(t, 0, p);
    auto y = bi_ssd(in);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t p = 0; p < 2; ++p) CHECK_THAT(y(t, 0, p), WithinAbs(y(L - 1 - t, 0, p + 2), 1e-13));
  }
}

TEST_CASE("causal forms ignore the future") {
  Rng rng(17);
  auto in = random_ssd<double>(rng, {24, 2, 4, 6});
  auto base_r = ssd_recurrent(in), base_q = ssd_quadratic(in);
  for (std::size_t t : {0u, 5u, 23u}) {
    auto pert = in;
    for (std::size_t p = 0; p < 4; ++p) pert.X(t, 1, p) += 0.75;
    pert.B(t, 2) -= 0.3;
    auto yr = ssd_recurrent(pert), yq = ssd_quadratic(pert);
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t p = 0; p < 4; ++p) {
          CHECK(yr(s, h, p) == base_r(s, h, p));
          CHECK(yq(s, h, p) == base_q(s, h, p));
        }
    CHECK(max_abs_diff(yr, base_r) > 0.0);
  }
}

TEST_CASE("batched scans match the single-sequence references") {
  Rng rng(31);
  const std::size_t Bt = 3, L = 11, Hd = 2, P = 4, N = 5;
  Tensor<double> X = random_uniform<double>({Bt, L, Hd, P}, rng), B = random_uniform<double>({Bt, L, N}, rng),
                 C = random_uniform<double>({Bt, L, N}, rng), A({Bt, L, Hd});
  for (auto& a : A.data()) a = std::exp(-rng.uniform(0.01, 1.5));
  Tape<double> tape;
  auto y = ssd_scan(tape.leaf(X), tape.leaf(B), tape.leaf(C), tape.leaf(A)).value();
  auto yb = bi_ssd_scan(tape.leaf(X), tape.leaf(B), tape.leaf(C), tape.leaf(A)).value();
  auto slice = [](const Tensor<double>& t, std::size_t b) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    const std::size_t n = numel(s);
    return Tensor<double>(s, std::vector<double>(t.ptr() + b * n, t.ptr() + (b + 1) * n));
  };
  for (std::size_t b = 0; b < Bt; ++b) {
    SsdSequenceInputs<double> in{slice(X, b), slice(B, b), slice(C, b), slice(A, b)};
    CHECK(max_abs_diff(slice(y, b), ssd_recurrent(in)) < 1e-13);
    CHECK(max_abs_diff(slice(yb, b), bi_ssd(in)) < 1e-13);
  }
}

TEST_CASE("scan gradients") {
  Rng rng(41);
  Tensor<double> X = random_uniform<double>({2, 7, 2, 4}, rng), B = random_uniform<double>({2, 7, 3}, rng),
                 C = random_uniform<double>({2, 7, 3}, rng), A({2, 7, 2}), W = random_uniform<double>({2, 7, 2, 4}, rng);
  for (auto& a : A.data()) a = std::exp(-rng.uniform(0.01, 1.5));
  for (bool bi : {false, true}) {
    auto r = grad_check(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          auto y = bi ? bi_ssd_scan(v[0], v[1], v[2], v[3]) : ssd_scan(v[0], v[1], v[2], v[3]);
          return ops::dot_const(y, W);
        },
        {&X, &B, &C, &A});
    CHECK(r.max_rel_error < 1e-6);
  }
}
