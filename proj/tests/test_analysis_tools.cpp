#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "vssd/analysis/erf.hpp"
#include "vssd/analysis/heatmap.hpp"
#include "vssd/analysis/image_io.hpp"
#include "vssd/analysis/stability.hpp"

using namespace vssd;
using namespace vssd::analysis;
using model::Mixer;
using model::ModelConfig;
using model::VssdModel;

namespace fs = std::filesystem;

namespace {

// One stage, patch stem, no LPU and no mixer convolution: every path other
// than the NC-SSD mixer is per-token.
ModelConfig global_config(std::size_t blocks = 1, Mixer mixer = Mixer::Ncssd) {
  ModelConfig c;
  c.name = "erf";
  c.num_classes = 0;
  c.stages = {{blocks, 8, 2, mixer, 4}};
  c.downsampling = model::Downsampling::Patch;
  c.lpu = false;
  c.mixer_conv = false;
  return c;
}

std::vector<Tensor<double>> images(std::size_t n, std::size_t C, std::size_t H, std::size_t W, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor<double>> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(random_uniform<double>({1, C, H, W}, rng));
  return v;
}

std::vector<Tensor<double>> dw_weights(std::size_t layers, std::size_t C, double lo, double hi) {
  Rng rng(3);
  std::vector<Tensor<double>> w;
  for (std::size_t i = 0; i < layers; ++i) w.push_back(random_uniform<double>({C, 3, 3}, rng, lo, hi));
  return w;
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vssd_analysis_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Swaps whole 4×4 pixel blocks: token j of the result is token perm[j] of x.
Tensor<double> permute_tokens(const Tensor<double>& x, const std::vector<std::size_t>& perm, std::size_t patch) {
  const std::size_t W = x.dim(3), gw = W / patch;
  Tensor<double> y(x.shape());
  for (std::size_t j = 0; j < perm.size(); ++j) {
    const std::size_t ty = j / gw, tx = j % gw, sy = perm[j] / gw, sx = perm[j] % gw;
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t a = 0; a < patch; ++a)
        for (std::size_t b = 0; b < patch; ++b) y(0, c, ty * patch + a, tx * patch + b) = x(0, c, sy * patch + a, sx * patch + b);
  }
  return y;
}

}  // namespace

TEST_CASE("receptive field of depthwise convolution stacks") {
  const auto imgs = images(2, 2, 11, 11, 1);
  for (std::size_t layers : {1, 3}) {
    CAPTURE(layers);
    const auto w = dw_weights(layers, 2, 0.5, 1.5);
    const auto m = erf_map(dwconv_stack_features(w), imgs);
    REQUIRE_FALSE(m.degenerate);
    CHECK(m.center_y == 5);
    CHECK(m.center_x == 5);
    const long r = long(layers);
    for (std::size_t y = 0; y < 11; ++y)
      for (std::size_t x = 0; x < 11; ++x) {
        const bool inside = std::abs(long(y) - 5) <= r && std::abs(long(x) - 5) <= r;
        if (inside) CHECK(m.grid(y, x) > 0.0);
        else CHECK(m.grid(y, x) == 0.0);
      }
    CHECK(max_abs(m.grid) == 1.0);
  }
}

TEST_CASE("zero weights give a degenerate map") {
  const auto w = dw_weights(2, 2, 0.0, 0.0);
  const auto m = erf_map(dwconv_stack_features(w), images(1, 2, 7, 7, 2));
  CHECK(m.degenerate);
  CHECK(max_abs(m.grid) == 0.0);
  CHECK(max_abs(m.log_grid) == 0.0);
}

TEST_CASE("erf argument errors") {
  const auto w = dw_weights(1, 2, 0.5, 1.5);
  const auto imgs = images(1, 2, 7, 7, 2);
  CHECK_THROWS_AS(erf_map(dwconv_stack_features(w), imgs, std::pair<std::size_t, std::size_t>{7, 0}), ParameterDomainError);
  CHECK_THROWS_AS(erf_map(dwconv_stack_features(w), imgs, std::pair<std::size_t, std::size_t>{0, 9}), ParameterDomainError);
  CHECK_THROWS_AS(erf_map(dwconv_stack_features(w), {}), ParameterDomainError);
  auto mixed = imgs;
  mixed.push_back(images(1, 2, 9, 9, 3)[0]);
  CHECK_THROWS_AS(erf_map(dwconv_stack_features(w), mixed), DimensionError);
}

TEST_CASE("NC-SSD receptive field is global") {
  Rng rng(5);
  VssdModel<double> net(global_config(), rng);
  const auto m = erf_map(model_features(net, 1), images(2, 3, 32, 32, 7));
  REQUIRE_FALSE(m.degenerate);
  CHECK(m.out_h == 8);
  const auto tokens = m.per_token(8, 8);
  for (double v : tokens.data()) CHECK(v > 0.0);
  std::size_t zero = 0;
  for (double v : m.raw.data()) zero += v == 0.0;
  CHECK(zero == 0);

  double mx = 0, lmx = 0;
  for (std::size_t i = 0; i < m.grid.size(); ++i) {
    CHECK(m.grid[i] >= 0.0);
    CHECK(m.grid[i] <= 1.0);
    CHECK(m.log_grid[i] >= 0.0);
    mx = std::max(mx, m.grid[i]);
    lmx = std::max(lmx, m.log_grid[i]);
  }
  CHECK(mx == 1.0);
  CHECK_THAT(lmx, Catch::Matchers::WithinAbs(1.0, 1e-15));

  SECTION("a local stack of the same depth stays local") {
    const auto dw = erf_map(dwconv_stack_features(dw_weights(1, 3, 0.5, 1.5)), images(2, 3, 32, 32, 7));
    std::size_t nonzero = 0;
    for (double v : dw.raw.data()) nonzero += v != 0.0;
    CHECK(nonzero == 9);
  }
}

TEST_CASE("NC-SSD receptive field is equivariant to raster order") {
  Rng rng(11);
  VssdModel<double> net(global_config(2), rng);
  Rng prng(12);
  const auto perm = prng.permutation(64);
  const std::size_t q = 9;  // original output token (1, 1)
  std::size_t k = 0;
  while (perm[k] != q) ++k;

  const auto x = images(1, 3, 32, 32, 13)[0];
  const auto base = erf_map(model_features(net, 1), {x}, std::pair<std::size_t, std::size_t>{q / 8, q % 8});
  const auto moved = erf_map(model_features(net, 1), {permute_tokens(x, perm, 4)},
                             std::pair<std::size_t, std::size_t>{k / 8, k % 8});

  Tensor<double> expected(base.raw.shape());
  {
    Tensor<double> b4({1, 1, 32, 32});
    for (std::size_t i = 0; i < base.raw.size(); ++i) b4[i] = base.raw[i];
    const auto p = permute_tokens(b4, perm, 4);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = p[i];
  }
  CHECK(max_abs_diff(moved.raw, expected) <= 1e-12 * max_abs(base.raw));
  // Raster distance alone would have moved the peak; the permuted map keeps
  // every token's saliency.
  CHECK(max_abs_diff(moved.raw, base.raw) > 1e-6 * max_abs(base.raw));
}

TEST_CASE("min-max normalization and bilinear upsampling") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = random_uniform<double>({4, 5}, rng);
    bool constant = true;
    const auto n = min_max_normalize(g, &constant);
    CHECK_FALSE(constant);
    CHECK(*std::min_element(n.data().begin(), n.data().end()) == 0.0);
    CHECK(*std::max_element(n.data().begin(), n.data().end()) == 1.0);

    // Odd factors put an output pixel exactly on every grid sample.
    for (std::size_t f : {1, 3, 5, 7}) {
      const auto up = bilinear_upsample(g, 4 * f, 5 * f);
      const auto am = std::max_element(g.data().begin(), g.data().end()) - g.data().begin();
      const auto au = std::max_element(up.data().begin(), up.data().end()) - up.data().begin();
      CHECK(std::size_t(au) / (5 * f) / f == std::size_t(am) / 5);
      CHECK(std::size_t(au) % (5 * f) / f == std::size_t(am) % 5);
    }
  }
  Tensor<double> c({3, 3});
  c.fill(0.4);
  bool constant = false;
  CHECK(max_abs(min_max_normalize(c, &constant)) == 0.0);
  CHECK(constant);
  const auto up = bilinear_upsample(c, 12, 7);
  for (double v : up.data()) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.4, 1e-15));
  const auto g = random_uniform<double>({3, 4}, rng);
  CHECK(max_abs_diff(bilinear_upsample(g, 3, 4), g) == 0.0);
}

TEST_CASE("m heatmap") {
  Rng rng(31);
  ModelConfig c = global_config(2);
  c.stages.push_back({1, 16, 2, Mixer::Ncssd, 4});
  VssdModel<double> net(c, rng);
  const auto x = images(1, 3, 32, 32, 32)[0];

  const auto maps = m_heatmap(net, x);
  REQUIRE(maps.size() == 2);
  CHECK(maps[0].raw.dim(0) == 8);
  CHECK(maps[1].raw.dim(0) == 4);
  for (const auto& h : maps) {
    for (double v : h.raw.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    CHECK_FALSE(h.constant);
    CHECK(max_abs(h.normalized) == 1.0);
  }

  SECTION("deterministic") {
    const auto again = m_heatmap(net, x, 0);
    CHECK(max_abs_diff(again.raw, maps[0].raw) == 0.0);
    CHECK(max_abs_diff(again.normalized, maps[0].normalized) == 0.0);
  }

  SECTION("constant image gives constant m") {
    Tensor<double> flat({1, 3, 32, 32});
    flat.fill(0.3);
    for (const auto& h : m_heatmap(net, flat)) {
      const auto [lo, hi] = std::minmax_element(h.raw.data().begin(), h.raw.data().end());
      CHECK(*hi - *lo <= 1e-14);
    }
  }

  SECTION("stage errors") {
    CHECK_THROWS_AS(m_heatmap(net, x, 2), ParameterDomainError);
    ModelConfig nom = global_config(1, Mixer::NcssdNoM);
    Rng r2(1);
    VssdModel<double> ablated(nom, r2);
    CHECK(m_heatmap(ablated, x).empty());
    CHECK_THROWS_AS(m_heatmap(ablated, x, 0), ParameterDomainError);
  }
}

TEST_CASE("netpbm output") {
  const auto dir = scratch("netpbm");
  Tensor<double> g({2, 3}, {0.0, 0.5, 1.0, 2.0, -1.0, 0.25});
  write_pgm(dir / "g.pgm", g);
  const auto r = read_netpbm(dir / "g.pgm");
  CHECK(r.channels == 1);
  CHECK(r.width == 3);
  CHECK(r.height == 2);
  CHECK(r.pixels == std::vector<std::uint8_t>{0, 128, 255, 255, 0, 64});
  CHECK(fs::file_size(dir / "g.pgm") == std::string("P5\n3 2\n255\n").size() + 6);

  Tensor<double> rgb({1, 2, 3}, {1.0, 0.0, 0.0, 0.0, 0.0, 1.0});
  write_ppm(dir / "c.ppm", rgb);
  const auto img = load_image(dir / "c.ppm");
  CHECK(img.shape() == Shape{1, 3, 1, 2});
  CHECK(img(0, 0, 0, 0) == 1.0);
  CHECK(img(0, 2, 0, 1) == 1.0);
  CHECK(img(0, 1, 0, 1) == 0.0);

  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0";
  CHECK_THROWS_AS(read_netpbm(dir / "bad.pgm"), FormatError);
  std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n4 4\n255\nabc";
  CHECK_THROWS_AS(read_netpbm(dir / "short.pgm"), FormatError);
  CHECK_THROWS_AS(write_ppm(dir / "x.ppm", g), DimensionError);
}

TEST_CASE("stability probe") {
  ProbeConfig p;
  p.train.model.stages = {{1, 8, 2, Mixer::Ncssd, 4}, {1, 16, 2, Mixer::Ncssd, 4}};
  p.train.dataset.image_size = 16;
  p.train.dataset.classes = 4;
  p.train.dataset.train_count = 48;
  p.train.dataset.val_count = 8;
  p.train.batch_size = 16;
  p.train.warmup_epochs = 0;
  p.train.epochs = 1;
  p.steps = 6;
  p.log_every = 2;

  const auto with = stability_probe(p);
  CHECK_FALSE(with.divergence_step.has_value());
  CHECK(with.completed_steps == 6);
  CHECK(with.logged_steps == 3);
  CHECK(with.rows.size() == with.blocks * with.logged_steps);
  CHECK(with.blocks == 2);
  for (const auto& r : with.rows) {
    CHECK(r.mean_norm >= 0.0);
    CHECK(r.max_norm >= r.mean_norm);
    CHECK(std::isfinite(r.loss));
  }

  p.with_m = false;
  CHECK(probe_model(p).stages[0].mixer == Mixer::NcssdNoM);
  const auto without = stability_probe(p);
  CHECK(without.rows.size() == without.blocks * without.logged_steps);
  for (const auto& r : without.rows) CHECK(std::isfinite(r.max_norm));

  const auto dir = scratch("stability");
  write_stability_csv(dir / "t.csv", without);
  std::ifstream f(dir / "t.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,with_m,stage,block,mean_norm,max_norm,loss");
  std::size_t lines = 0;
  while (std::getline(f, line)) {
    CHECK(line.rfind(std::to_string(without.rows[lines].step) + ",0,", 0) == 0);
    ++lines;
  }
  CHECK(lines == without.rows.size());

  const auto rep = stability_report(with, without);
  CHECK(rep["with_m"]["completed_steps"] == 6);
  CHECK(rep["without_m"]["with_m"] == false);
  CHECK(rep["with_m"]["final_max_norms"].size() == 2);

  SECTION("divergence is recorded, not thrown") {
    p.with_m = true;
    p.train.lr = std::numeric_limits<double>::infinity();
    const auto bad = stability_probe(p);
    REQUIRE(bad.divergence_step.has_value());
    CHECK(*bad.divergence_step == 1);
    CHECK(bad.completed_steps == 1);
    CHECK_FALSE(bad.divergence_reason.empty());
    CHECK(bad.rows.size() == bad.blocks * bad.logged_steps);
  }

  SECTION("config from json") {
    nlohmann::json j = {{"steps", 9}, {"log_every", 3}, {"with_m", false}, {"lr", 0.01}};
    const auto q = probe_config_from_json(j);
    CHECK(q.steps == 9);
    CHECK(q.log_every == 3);
    CHECK_FALSE(q.with_m);
    CHECK(q.train.lr == 0.01);
    CHECK_THROWS_AS(probe_config_from_json({{"steps", "many"}}), ConfigError);
    ProbeConfig z;
    z.steps = 0;
    CHECK_THROWS_AS(z.validate(), ConfigError);
  }
}
