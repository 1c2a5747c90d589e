#include <catch_amalgamated.hpp>

#include "support.hpp"
#include "vssd/core/grad_check.hpp"
#include "vssd/ncssd/autodiff.hpp"
#include "vssd/ssd/autodiff.hpp"

using namespace vssd;
using namespace vssd::ncssd;
using vssd::testing::batch1;
using vssd::testing::random_dims;
using vssd::testing::random_ncssd;
using Catch::Matchers::WithinAbs;

namespace {

NcssdInputs<double> scalar_instance(std::vector<double> x, std::vector<double> b, std::vector<double> c,
                                    std::vector<double> m) {
  const std::size_t L = x.size();
  return {Tensor<double>({L, 1, 1}, x), Tensor<double>({L, 1}, b), Tensor<double>({L, 1}, c),
          Tensor<double>({L, 1}, m), {}};
}

std::vector<ScanRoute> routes(std::size_t H, std::size_t W, Rng& rng) {
  const std::size_t L = H * W;
  return {ScanRoute::identity(L), ScanRoute::reversed(L), ScanRoute::column_major(H, W),
          ScanRoute::transpose_raster(H, W), ScanRoute::random(L, rng)};
}

}  // namespace

TEST_CASE("rewritten recurrence") {
  auto one = scalar_instance({3}, {2}, {1}, {0.5});
  CHECK(ncssd_rewritten_recurrence(one)[0] == 3.0);

  auto acc = scalar_instance({1, -2, 4, 0.5}, {1, 1, 1, 1}, {1, 1, 1, 1}, {1, 1, 1, 1});
  CHECK(ncssd_rewritten_recurrence(acc).storage() == std::vector<double>{1, -1, 3, 3.5});

  Rng rng(4);
  for (int it = 0; it < 20; ++it) {
    auto in = random_ncssd<double>(rng, random_dims(rng, 64, 8, 8));
    auto h = ncssd_rewritten_recurrence(in);
    const std::size_t block = in.heads() * in.state() * in.headdim();
    Tensor<double> last({in.heads(), in.state(), in.headdim()},
                        std::vector<double>(h.ptr() + (in.length() - 1) * block, h.ptr() + in.length() * block));
    CHECK(max_abs_diff(last, ncssd_hidden_state(in).H) < 1e-12);
  }
}

TEST_CASE("bidirectional hidden-state identity") {
  auto in = scalar_instance({1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {1, 2, 3});
  CHECK(bidir_hidden_identity(in, 2)[0] == 8.0);
  CHECK(bidir_hidden_identity(in, 1)[0] == 7.0);
  CHECK(bidir_hidden_identity(in, 3)[0] == 9.0);
  CHECK_THROWS_AS(bidir_hidden_identity(in, 0), ParameterDomainError);
  CHECK_THROWS_AS(bidir_hidden_identity(in, 4), ParameterDomainError);

  Rng rng(6);
  auto r = random_ncssd<double>(rng, {30, 2, 3, 4});
  for (std::size_t i = 1; i <= 30; ++i) CHECK_NOTHROW(bidir_hidden_identity(r, i));
}

TEST_CASE("hidden state values and order independence") {
  CHECK(ncssd_hidden_state(scalar_instance({1, 2}, {1, 1}, {1, 1}, {1, 1})).H[0] == 3.0);
  CHECK(ncssd_hidden_state(scalar_instance({1, 2}, {1, 1}, {1, 1}, {2, 1})).H[0] == 4.0);

  Rng rng(12);
  auto in = random_ncssd<double>(rng, {48, 2, 5, 7});
  const auto ref = ncssd_hidden_state(in).H;
  for (const auto& r : routes(6, 8, rng)) {
    auto routed = apply_scan_route(in, r);
    CHECK(bitwise_equal(ncssd_hidden_state(routed).H, ref));
  }
}

TEST_CASE("contraction and fused forms") {
  auto in = scalar_instance({1, 2}, {1, 1}, {1, 1}, {1, 1});
  CHECK(ncssd_contraction(in).storage() == std::vector<double>{3, 3});
  CHECK(ncssd_fused(in).storage() == std::vector<double>{3, 3});
  auto in2 = scalar_instance({1, 2}, {1, 1}, {1, 1}, {2, 1});
  CHECK(ncssd_fused(in2).storage() == std::vector<double>{4, 4});

  Rng rng(15);
  auto z = random_ncssd<double>(rng, {9, 2, 3, 4});
  z.X.fill(0.0);
  CHECK(max_abs(ncssd_fused(z)) == 0.0);

  // At L = 1 with m = 1 the non-causal output equals the causal one.
  auto single = random_ncssd<double>(rng, {1, 2, 3, 4});
  single.m.fill(1.0);
  ssd::SsdSequenceInputs<double> causal{single.X, single.B, single.C, Tensor<double>({1, 2}, 0.5)};
  CHECK(max_abs_diff(ncssd_contraction(single), ssd::ssd_recurrent(causal)) < 1e-15);

  for (int it = 0; it < 40; ++it) {
    auto r = random_ncssd<double>(rng, random_dims(rng, 256, 32, 32));
    CHECK(max_abs_diff(ncssd_contraction(r), ncssd_fused(r)) < 1e-12);
    NcssdOptions with_self{true};
    CHECK(max_abs_diff(ncssd_contraction(r, with_self), ncssd_fused(r, with_self)) < 1e-12);
  }
}

TEST_CASE("self term restores the bidirectional form") {
  Rng rng(19);
  auto in = random_ncssd<double>(rng, {12, 2, 3, 4});
  auto y = ncssd_contraction(in, NcssdOptions{true});
  for (std::size_t i = 1; i <= 12; ++i) {
    auto Hi = bidir_hidden_identity(in, i);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t p = 0; p < 3; ++p) {
        double s = 0;
        for (std::size_t n = 0; n < 4; ++n) s += in.C(i - 1, n) * Hi(h, n, p);
        CHECK_THAT(y(i - 1, h, p), WithinAbs(s, 1e-12));
      }
  }
}

TEST_CASE("compute_m") {
  MParams<double> p{Tensor<double>({1, 2}, {0.0, 0.0}), Tensor<double>({1}, {-60.0}), Tensor<double>({1}, {0.0})};
  Tensor<double> x({3, 2}, {1, 2, 3, 4, 5, 6});
  auto m = compute_m(x, p);
  for (double v : m.data()) CHECK_THAT(v, WithinAbs(1.0, 1e-20));

  // softplus(z) = ln 2 when z = ln(e^{ln 2} − 1) = 0.
  p.b_delta[0] = 0.0;
  CHECK_THAT(compute_m(x, p)[0], WithinAbs(0.5, 1e-15));

  // m falls strictly as the step grows.
  p.w_delta = Tensor<double>({1, 2}, {1.0, 0.0});
  p.a_log[0] = -0.3;
  Tensor<double> grid({41, 2});
  for (std::size_t i = 0; i < 41; ++i) grid(i, 0) = -10.0 + 0.5 * double(i);
  auto mg = compute_m(grid, p);
  for (std::size_t i = 1; i < 41; ++i) CHECK(mg[i] < mg[i - 1]);
  for (double v : mg.data()) CHECK((v > 0.0 && v < 1.0));
}

TEST_CASE("scan routes") {
  Rng rng(23);
  auto in = random_ncssd<double>(rng, {20, 2, 3, 4});
  auto same = apply_scan_route(in, ScanRoute::identity(20));
  CHECK(bitwise_equal(same.X, in.X));
  CHECK(bitwise_equal(same.m, in.m));

  for (const auto& r : routes(4, 5, rng)) {
    auto there = apply_scan_route(in, r);
    auto back = apply_scan_route(there, r.inverse());
    CHECK(bitwise_equal(back.X, in.X));
    CHECK(bitwise_equal(back.B, in.B));
    for (std::size_t k = 0; k < 20; ++k) CHECK(back.token_index[k] == k);
    CHECK(r.after(r.inverse()).order == ScanRoute::identity(20).order);
  }

  CHECK(ScanRoute::column_major(2, 3).order == std::vector<std::size_t>{0, 3, 1, 4, 2, 5});
  CHECK(ScanRoute::transpose_raster(2, 3).order == std::vector<std::size_t>{0, 3, 4, 1, 2, 5});

  ScanRoute bad{"dup", {0, 1, 1}};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  auto small = random_ncssd<double>(rng, {3, 1, 1, 1});
  CHECK_THROWS_AS(apply_scan_route(small, bad), ValidationError);
}

TEST_CASE("permutation equivariance") {
  Rng rng(29);
  auto in = random_ncssd<double>(rng, {63, 3, 4, 6});
  const auto y = ncssd_fused(in), yc = ncssd_contraction(in);
  for (const auto& r : routes(7, 9, rng)) {
    auto routed = apply_scan_route(in, r);
    CHECK(max_abs_diff(ncssd_fused(routed), permute_tokens(y, r)) < 1e-12);
    CHECK(max_abs_diff(ncssd_contraction(routed), permute_tokens(yc, r)) < 1e-12);
  }
}

TEST_CASE("every token reaches every output") {
  Rng rng(37);
  auto in = random_ncssd<double>(rng, {16, 2, 3, 4});
  const auto base = ncssd_fused(in);
  for (std::size_t t : {0u, 9u, 15u}) {
    auto pert = in;
    for (std::size_t p = 0; p < 3; ++p) pert.X(t, 0, p) += 0.5;
    auto y = ncssd_fused(pert);
    for (std::size_t s = 0; s < 16; ++s) CHECK(std::abs(y(s, 0, 0) - base(s, 0, 0)) > 0.0);
  }
}

TEST_CASE("batched ops match the sequence kernels") {
  Rng rng(43);
  auto in = random_ncssd<double>(rng, {21, 2, 5, 6});
  Tape<double> tape;
  auto X = batch1(in.X), B = batch1(in.B), C = batch1(in.C), m = batch1(in.m);
  auto yf = ncssd::ncssd_fused(tape.leaf(X), tape.leaf(B), tape.leaf(C), tape.leaf(m)).value();
  auto yc = ncssd::ncssd_contraction(tape.leaf(X), tape.leaf(B), tape.leaf(C), tape.leaf(m)).value();
  const auto ref = batch1(ncssd_fused(in));
  CHECK(max_abs_diff(yf, ref) < 1e-13);
  CHECK(max_abs_diff(yc, ref) < 1e-12);
}

TEST_CASE("gradients of the batched forms") {
  Rng rng(47);
  Tensor<double> X = random_uniform<double>({2, 9, 2, 3}, rng), B = random_uniform<double>({2, 9, 4}, rng),
                 C = random_uniform<double>({2, 9, 4}, rng), m({2, 9, 2});
  for (auto& v : m.data()) v = std::exp(-rng.uniform(0.01, 1.5));
  auto sq = [](Var<double> y) { return ops::sum(ops::square(y)); };
  auto rf = grad_check([&](Tape<double>&, const std::vector<Var<double>>& v) { return sq(ncssd::ncssd_fused(v[0], v[1], v[2], v[3])); },
                       {&X, &B, &C, &m});
  CHECK(rf.max_rel_error < 1e-6);
  auto rc = grad_check(
      [&](Tape<double>&, const std::vector<Var<double>>& v) { return sq(ncssd::ncssd_contraction(v[0], v[1], v[2], v[3])); },
      {&X, &B, &C, &m});
  CHECK(rc.max_rel_error < 1e-6);
}
