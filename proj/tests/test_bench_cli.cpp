#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "vssd/analysis/image_io.hpp"
#include "vssd/bench/bench.hpp"
#include "vssd/bench/check.hpp"
#include "vssd/core/nctd.hpp"
#include "vssd/model/checkpoint.hpp"

using namespace vssd;
using namespace vssd::bench;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vssd_bench_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI named by VSSD_CLI with stderr folded into stdout.
Run cli(const std::string& args) {
  const char* exe = std::getenv("VSSD_CLI");
  if (!exe) FAIL("VSSD_CLI is not set");
  Run r;
  FILE* p = popen((std::string(exe) + " " + args + " 2>&1").c_str(), "r");
  REQUIRE(p);
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

BenchSpec small(const std::string& variant) {
  BenchSpec s;
  s.variant = variant;
  s.L = 64;
  s.N = 4;
  s.P = 4;
  s.batch = 2;
  s.warmup = 1;
  s.iters = 5;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("bench spec validation") {
  CHECK_NOTHROW(BenchSpec{}.validate());
  auto s = small("ssd");
  s.batch = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small("ssd");
  s.iters = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small("ssd");
  s.warmup = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small("mamba");
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small("bi-ssd");
  s.P = 3;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small("nc-ssd-fused");
  s.dtype = "float16";
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("statistics and hashing") {
  CHECK(fnv1a("", 0) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a", 1) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar", 6) == 0x85944171f73967e8ULL);
  CHECK(fnv1a("bar", 3, fnv1a("foo", 3)) == fnv1a("foobar", 6));

  CHECK(quantile({3, 1, 2}, 0.5) == 2.0);
  CHECK(quantile({4, 1, 3, 2}, 0.5) == 2.5);
  CHECK(quantile({1, 2, 3, 4, 5}, 0.25) == 2.0);
  CHECK(quantile({1, 2, 3, 4, 5}, 0.75) == 4.0);
  CHECK_THROWS_AS(quantile({}, 0.5), EvaluationError);
}

TEST_CASE("every variant consumes identical inputs") {
  std::uint64_t h = 0;
  for (const auto& v : variant_names()) {
    const auto in = make_inputs<float>(small(v));
    if (h == 0) h = in.hash();
    CHECK(in.hash() == h);
  }
  auto other = small("ssd");
  other.seed = 1;
  CHECK(make_inputs<float>(other).hash() != h);
  CHECK(make_inputs<double>(small("ssd")).hash() != h);
}

TEST_CASE("bench records and CSV") {
  const auto dir = scratch("csv");
  for (const auto& v : variant_names()) {
    for (const char* mode : {"forward", "forward+backward"}) {
      auto s = small(v);
      s.mode = mode;
      const auto r = run_bench(s);
      CHECK(r.times.size() == 5);
      CHECK(r.median_s > 0);
      CHECK(r.iqr_s >= 0);
      CHECK_THAT(r.throughput * r.median_s, Catch::Matchers::WithinRel(2.0, 1e-12));
      CHECK(r.host.threads == configured_threads());
      append_csv(dir / "b.csv", r);
    }
  }
  std::ifstream f(dir / "b.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line ==
        "variant,mode,dtype,L,N,P,heads,batch,warmup,iters,seed,threads,median_s,iqr_s,throughput_seq_per_s,input_hash,"
        "host,cpu,timestamp");
  std::size_t rows = 0;
  while (std::getline(f, line)) {
    ++rows;
    CHECK(line.rfind(variant_names()[(rows - 1) / 2] + ",", 0) == 0);
  }
  CHECK(rows == 8);

  std::ofstream(dir / "other.csv") << "a,b\n1,2\n";
  CHECK_THROWS_AS(append_csv(dir / "other.csv", run_bench(small("ssd"))), FormatError);
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,\"b\"") == "\"a,\"\"b\"\"\"");
}

TEST_CASE("memory budget is enforced before timing") {
  auto s = small("nc-ssd-fused");
  CHECK(estimate_bytes(s) > 0);
  CHECK_THROWS_AS(run_bench(s, 1024), ResourceError);
  s.L = 1u << 30;
  CHECK_THROWS_AS(check_resources(s), ResourceError);
}

TEST_CASE("efficiency ordering at matched shapes") {
  BenchSpec s;  // L=3136, N=16, P=24, heads=2, batch=8, float32
  s.warmup = 1;
  s.iters = 5;
  auto time = [&](const std::string& v, const std::string& mode) {
    auto t = s;
    t.variant = v;
    t.mode = mode;
    return run_bench(t).median_s;
  };
  const double fused = time("nc-ssd-fused", "forward+backward");
  CHECK(fused < time("bi-ssd", "forward+backward"));
  CHECK(fused < time("ssd", "forward+backward"));
  CHECK(time("nc-ssd-fused", "forward") <= time("nc-ssd-contraction", "forward"));
}

TEST_CASE("check suites") {
  CheckOptions o{42, 20, Fault::None};
  for (const auto& n : suite_names()) {
    CAPTURE(n);
    const auto a = run_suite(n, o);
    CHECK(a.passed);
    CHECK(a.instances > 0);
    CHECK_FALSE(a.worst_check.empty());
    CHECK(a.worst_error <= a.tolerance);
    const auto b = run_suite(n, o);
    CHECK(a.worst_error == b.worst_error);
    CHECK(a.worst_check == b.worst_check);
  }
  CHECK_THROWS_AS(run_suite("speed", o), ConfigError);

  o.fault = Fault::MaskSign;
  const auto m = run_suite("mask", o);
  CHECK_FALSE(m.passed);
  CHECK_THAT(m.failure, ContainsSubstring("instance seed " + std::to_string(instance_seed(42, 0))));
  CHECK(run_suite("equivalence", o).passed);

  CHECK(suites_for_variant("ssd") == std::vector<std::string>{"equivalence", "mask", "gradient"});
  CHECK(suites_for_variant("nc-ssd-fused") == std::vector<std::string>{"equivalence", "invariance", "gradient"});
}

TEST_CASE("tensor exchange") {
  const auto dir = scratch("tensor");
  Rng rng(4);
  const auto t = random_normal<double>({3, 4}, rng);
  nctd::write(dir / "t.nctd", t);
  const auto back = nctd::read<double>(dir / "t.nctd");
  CHECK(std::memcmp(back.ptr(), t.ptr(), 12 * sizeof(double)) == 0);

  auto bytes = nctd::encode(t);
  bytes.resize(bytes.size() - 5);
  CHECK_THROWS_MATCHES(nctd::decode(bytes), FormatError,
                       Catch::Matchers::MessageMatches(ContainsSubstring("expected") && ContainsSubstring("got")));

  SECTION("file written by an independent writer") {
    if (std::system("python3 -c 'import struct' >/dev/null 2>&1") != 0) SKIP("python3 unavailable");
    const auto path = dir / "py.nctd";
    const std::string script =
        "import struct,sys\n"
        "vals=[0.5*i-1.25 for i in range(6)]\n"
        "b=b'NCTD'+struct.pack('<IBB',1,2,2)+struct.pack('<QQ',2,3)+struct.pack('<6d',*vals)\n"
        "open(sys.argv[1],'wb').write(b)\n";
    std::ofstream(dir / "w.py") << script;
    REQUIRE(std::system(("python3 " + (dir / "w.py").string() + " " + path.string()).c_str()) == 0);
    const auto py = nctd::read<double>(path);
    CHECK(py.shape() == Shape{2, 3});
    for (std::size_t i = 0; i < 6; ++i) CHECK(py[i] == 0.5 * double(i) - 1.25);
  }
}

TEST_CASE("cli check") {
  const auto ok = cli("check --instances 5");
  CHECK(ok.code == 0);
  CHECK_THAT(ok.out, ContainsSubstring("suite gradient: PASS"));
  CHECK_THAT(ok.out, ContainsSubstring("all suites passed"));

  const auto a = cli("check --seed 42 --instances 5");
  const auto b = cli("check --seed 42 --instances 5");
  CHECK(a.out == b.out);

  const auto bad = cli("check --suite mask --instances 5 --inject-fault mask-sign");
  CHECK(bad.code == 1);
  CHECK_THAT(bad.out, ContainsSubstring("suite mask: FAIL"));
  CHECK_THAT(bad.out, ContainsSubstring("instance seed"));
  CHECK(cli("check --suite nope").code == 1);
}

TEST_CASE("cli bench") {
  const auto dir = scratch("cli_bench");
  const std::string shape = " --len 32 --state 4 --headdim 4 --heads 2 --batch 2 --iters 5 --warmup 1";
  const auto r = cli("bench --variant all" + shape + " --csv " + (dir / "b.csv").string());
  CHECK(r.code == 0);
  CHECK_THAT(r.out, ContainsSubstring("threads="));
  std::ifstream f(dir / "b.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == 5);

  const auto refused = cli("bench --variant ssd --inject-fault mask-sign" + shape);
  CHECK(refused.code == 1);
  CHECK_THAT(refused.out, ContainsSubstring("refusing"));
  CHECK(cli("bench --variant ssd --force --inject-fault mask-sign" + shape).code == 0);
  // The mask suite is not a prerequisite of the NC-SSD kernels.
  CHECK(cli("bench --variant nc-ssd-fused --inject-fault mask-sign" + shape).code == 0);

  CHECK(cli("bench --variant ssd --batch 0").code == 1);
  const auto big = cli("bench --variant ssd --len 100000000 --batch 64");
  CHECK(big.code == 3);
  CHECK_THAT(big.out, ContainsSubstring("resource"));
}

TEST_CASE("cli tensors and params") {
  const auto dir = scratch("cli_tensor");
  Rng rng(8);
  const auto t = random_normal<double>({2, 5}, rng);
  nctd::write(dir / "a.nctd", t);
  CHECK(cli("export-tensor --in " + (dir / "a.nctd").string() + " --out " + (dir / "a.json").string()).code == 0);
  CHECK(cli("import-tensor --in " + (dir / "a.json").string() + " --out " + (dir / "b.nctd").string()).code == 0);
  const auto back = nctd::read<double>(dir / "b.nctd");
  CHECK(std::memcmp(back.ptr(), t.ptr(), t.size() * sizeof(double)) == 0);
  CHECK(cli("import-tensor --in " + (dir / "a.json").string() + " --out " + (dir / "c.nctd").string() +
            " --dtype float32")
            .code == 0);
  CHECK(nctd::read<float>(dir / "c.nctd").shape() == Shape{2, 5});

  std::ofstream(dir / "junk.nctd") << "JUNKJUNK";
  const auto bad = cli("export-tensor --in " + (dir / "junk.nctd").string());
  CHECK(bad.code == 1);
  CHECK_THAT(bad.out, ContainsSubstring("magic"));

  const auto p = cli("params --variant micro --json");
  CHECK(p.code == 0);
  const auto j = nlohmann::json::parse(p.out);
  CHECK(j["flops"].get<double>() == 2 * j["macs"].get<double>());
  CHECK(j["stages"].size() == 4);
}

TEST_CASE("cli train, analysis and stability") {
  const auto dir = scratch("cli_train");
  const nlohmann::json model = {{"blocks", {1, 1}}, {"channels", {8, 16}}, {"heads", {2, 2}}, {"state_dim", 4}};
  nlohmann::json cfg = {{"epochs", 2},
                        {"warmup_epochs", 1},
                        {"batch_size", 16},
                        {"lr", 1e-3},
                        {"dataset", {{"source", "synthetic"}, {"image_size", 16}, {"classes", 4}, {"train_count", 32}, {"val_count", 16}}},
                        {"model", model}};
  std::ofstream(dir / "train.json") << cfg.dump();
  const auto run = cli("train --config " + (dir / "train.json").string() + " --out " + (dir / "run").string());
  CHECK(run.code == 0);
  CHECK(fs::exists(dir / "run" / "metrics.csv"));
  REQUIRE(fs::exists(dir / "run" / "checkpoint" / "manifest.json"));

  cfg["lr"] = 1e6;
  std::ofstream(dir / "bad.json") << cfg.dump();
  const auto div = cli("train --config " + (dir / "bad.json").string() + " --out " + (dir / "bad").string());
  CHECK(div.code == 2);
  CHECK_THAT(div.out, ContainsSubstring("diverged"));

  fs::create_directories(dir / "images");
  Rng rng(2);
  for (int i = 0; i < 2; ++i) {
    const auto px = random_uniform<double>({16, 16, 3}, rng, 0.0, 1.0);
    analysis::write_ppm(dir / "images" / ("i" + std::to_string(i) + ".ppm"), px);
  }
  const std::string ckpt = (dir / "run" / "checkpoint").string();
  const auto e = cli("erf --ckpt " + ckpt + " --images " + (dir / "images").string() + " --out " +
                     (dir / "erf.pgm").string() + " --log-scale");
  CHECK(e.code == 0);
  const auto erf = analysis::read_netpbm(dir / "erf.pgm");
  CHECK(erf.width == 16);
  CHECK(*std::max_element(erf.pixels.begin(), erf.pixels.end()) == 255);
  CHECK(cli("erf --ckpt " + ckpt + " --images " + (dir / "images").string() + " --out x.pgm --stage 3").code == 1);

  const auto h = cli("heatmap-m --ckpt " + ckpt + " --image " + (dir / "images" / "i0.ppm").string() +
                     " --stage 1 --upsample --out " + (dir / "m.pgm").string() + " --overlay " + (dir / "m.ppm").string());
  CHECK(h.code == 0);
  CHECK(analysis::read_netpbm(dir / "m.pgm").width == 16);
  CHECK(analysis::read_netpbm(dir / "m.ppm").channels == 3);
  const auto h2 = cli("heatmap-m --ckpt " + ckpt + " --image " + (dir / "images" / "i0.ppm").string() +
                      " --stage 1 --upsample --out " + (dir / "m2.pgm").string());
  CHECK(slurp(dir / "m.pgm") == slurp(dir / "m2.pgm"));

  nlohmann::json probe = cfg;
  probe["lr"] = 1e-3;
  probe["steps"] = 3;
  std::ofstream(dir / "probe.json") << probe.dump();
  const auto s = cli("stability --config " + (dir / "probe.json").string() + " --no-m --out " +
                     (dir / "trace.csv").string() + " --report " + (dir / "report.json").string());
  CHECK(s.code == 0);
  CHECK_THAT(s.out, ContainsSubstring("m = 1: 3 steps"));
  std::ifstream tf(dir / "trace.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(tf, line)) ++rows;
  CHECK(rows == 1 + 2 * 3);
  const auto rep = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(rep["with_m"]["completed_steps"] == 3);
  CHECK(rep["without_m"]["completed_steps"] == 3);
}
