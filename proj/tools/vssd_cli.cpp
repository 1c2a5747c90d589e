#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "vssd/vssd.hpp"

namespace fs = std::filesystem;
using namespace vssd;

namespace {

// Exit codes beyond 0/1.
constexpr int kDiverged = 2;
constexpr int kResource = 3;

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw ConfigError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void print_suite(const bench::SuiteResult& r) {
  std::cout << "suite " << r.name << ": " << (r.passed ? "PASS" : "FAIL") << " instances=" << r.instances
            << " worst=" << r.worst_error << " tol=" << r.tolerance << " (" << r.worst_check << ")\n";
  if (!r.passed) std::cout << "  failure: " << r.failure << '\n';
}

bench::Fault parse_fault(const std::string& s) {
  if (s.empty() || s == "none") return bench::Fault::None;
  if (s == "mask-sign") return bench::Fault::MaskSign;
  throw ConfigError("unknown fault '" + s + "'");
}

/// Images [1, 3, H, W] standardized with the CIFAR channel statistics.
Tensor<double> standardized(const fs::path& p) {
  auto t = analysis::load_image(p);
  const train::Dataset stats;
  const std::size_t plane = t.dim(2) * t.dim(3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] = (t[c * plane + i] - stats.mean[c]) / stats.std[c];
  return t;
}

std::vector<fs::path> image_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .ppm or .pgm images in " + dir.string());
  return files;
}

std::size_t stage_arg(std::size_t stage, const model::ModelConfig& c) {
  if (stage < 1 || stage > c.stages.size()) {
    throw ParameterDomainError("stage must lie in 1.." + std::to_string(c.stages.size()));
  }
  return stage - 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VSSD kernels, model, training and analysis tools"};
  app.require_subcommand(1);

  // check
  auto* check = app.add_subcommand("check", "Run the correctness suites");
  std::string suite, fault;
  std::uint64_t seed = 0;
  std::size_t instances = 50;
  check->add_option("--suite", suite, "Suite name (equivalence, invariance, mask, gradient); default all");
  check->add_option("--seed", seed, "Base seed");
  check->add_option("--instances", instances, "Random instances per suite")->check(CLI::PositiveNumber);
  check->add_option("--inject-fault", fault, "Test hook: mask-sign")->group("");

  // bench
  auto* benchc = app.add_subcommand("bench", "Time one kernel variant and append a CSV row");
  bench::BenchSpec spec;
  std::string csv;
  bool force = false;
  std::size_t budget_mb = 0;
  benchc->add_option("--variant", spec.variant, "ssd, bi-ssd, nc-ssd-contraction, nc-ssd-fused or all")->required();
  benchc->add_option("--len", spec.L, "Sequence length L");
  benchc->add_option("--state", spec.N, "State size N");
  benchc->add_option("--headdim", spec.P, "Head width P");
  benchc->add_option("--heads", spec.heads, "Heads");
  benchc->add_option("--batch", spec.batch, "Batch size");
  benchc->add_option("--dtype", spec.dtype, "float32 or float64");
  benchc->add_option("--mode", spec.mode, "forward or forward+backward");
  benchc->add_option("--warmup", spec.warmup, "Warmup iterations");
  benchc->add_option("--iters", spec.iters, "Timed iterations");
  benchc->add_option("--seed", spec.seed, "Input seed");
  benchc->add_option("--csv", csv, "CSV file to append to");
  benchc->add_option("--mem-budget-mb", budget_mb, "Memory budget; default 80% of available memory");
  benchc->add_flag("--force", force, "Time even if a correctness suite fails");
  benchc->add_option("--inject-fault", fault, "Test hook: mask-sign")->group("");

  // train
  auto* trainc = app.add_subcommand("train", "Train a model from a JSON config");
  std::string config, data, out;
  trainc->add_option("--config", config, "Training config (JSON)")->required();
  trainc->add_option("--data", data, "CIFAR-10 binary directory; selects the cifar10 source");
  trainc->add_option("--out", out, "Output directory")->required();

  // erf
  auto* erfc = app.add_subcommand("erf", "Effective receptive field of a checkpoint");
  std::string ckpt, images;
  bool log_scale = false;
  std::size_t stage = 0, limit = 0;
  erfc->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  erfc->add_option("--images", images, "Directory of .ppm/.pgm images")->required();
  erfc->add_option("--out", out, "Output .pgm")->required();
  erfc->add_option("--stage", stage, "Feature stage 1..S; default the last");
  erfc->add_option("--limit", limit, "Use at most this many images");
  erfc->add_flag("--log-scale", log_scale, "Write the log(1 + x) map");

  // heatmap-m
  auto* heatc = app.add_subcommand("heatmap-m", "Head-averaged m of one stage");
  std::string image, overlay;
  bool upsample = false;
  heatc->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  heatc->add_option("--image", image, "Input .ppm/.pgm")->required();
  heatc->add_option("--stage", stage, "Stage 1..S")->required();
  heatc->add_option("--out", out, "Output .pgm")->required();
  heatc->add_flag("--upsample", upsample, "Resize to the input resolution");
  heatc->add_option("--overlay", overlay, "Also write an overlay .ppm");

  // stability
  auto* stabc = app.add_subcommand("stability", "Train briefly and log per-block activation norms");
  bool no_m = false;
  std::string report;
  stabc->add_option("--config", config, "Probe config (JSON)")->required();
  stabc->add_flag("--no-m", no_m, "Replace m with ones");
  stabc->add_option("--out", out, "Trace CSV")->required();
  stabc->add_option("--report", report, "Also run the other arm and write a JSON comparison");

  // tensors
  auto* exportc = app.add_subcommand("export-tensor", "NCTD to JSON");
  std::string in;
  exportc->add_option("--in", in, "NCTD file")->required();
  exportc->add_option("--out", out, "JSON file; default stdout");
  auto* importc = app.add_subcommand("import-tensor", "JSON to NCTD");
  std::string dtype;
  importc->add_option("--in", in, "JSON file with shape and data")->required();
  importc->add_option("--out", out, "NCTD file")->required();
  importc->add_option("--dtype", dtype, "float32 or float64; default from the file");

  // params
  auto* paramsc = app.add_subcommand("params", "Parameter and FLOP count of a variant or config");
  std::string name = "micro";
  std::size_t image_size = 224, state_dim = 64;
  bool as_json = false;
  paramsc->add_option("--variant", name, "micro, tiny, small or base");
  paramsc->add_option("--config", config, "Model config (JSON) instead of a named variant");
  paramsc->add_option("--image", image_size, "Input resolution");
  paramsc->add_option("--state", state_dim, "SSM state size");
  paramsc->add_flag("--json", as_json, "JSON output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*check) {
      bench::CheckOptions o{seed, instances, parse_fault(fault)};
      std::vector<std::string> names = suite.empty() ? bench::suite_names() : std::vector<std::string>{suite};
      bool ok = true;
      for (const auto& n : names) {
        const auto r = bench::run_suite(n, o);
        print_suite(r);
        ok = ok && r.passed;
      }
      std::cout << (ok ? "all suites passed" : "suite failure") << " (seed " << seed << ")\n";
      return ok ? 0 : 1;
    }

    if (*benchc) {
      std::vector<std::string> variants =
          spec.variant == "all" ? bench::variant_names() : std::vector<std::string>{spec.variant};
      std::vector<bench::BenchSpec> specs;
      for (const auto& v : variants) {
        auto s = spec;
        s.variant = v;
        s.validate();
        bench::check_resources(s, budget_mb << 20);
        specs.push_back(s);
      }
      if (!force) {
        std::set<std::string> needed;
        for (const auto& v : variants)
          for (const auto& s : bench::suites_for_variant(v)) needed.insert(s);
        bench::CheckOptions o{spec.seed, 10, parse_fault(fault)};
        for (const auto& n : needed) {
          const auto r = bench::run_suite(n, o);
          print_suite(r);
          if (!r.passed) {
            std::cerr << "refusing to benchmark: suite " << n << " failed (use --force to override)\n";
            return 1;
          }
        }
      }
      std::cout << "threads=" << configured_threads() << '\n';
      std::set<std::uint64_t> hashes;
      for (const auto& s : specs) {
        const auto r = bench::run_bench(s, budget_mb << 20);
        hashes.insert(r.input_hash);
        std::cout << bench::csv_row(r) << '\n';
        if (!csv.empty()) bench::append_csv(csv, r);
      }
      if (hashes.size() != 1) throw InternalConsistencyError("bench: variants consumed different inputs");
      return 0;
    }

    if (*trainc) {
      auto cfg = read_json(config).get<train::TrainConfig>();
      if (!data.empty()) {
        cfg.dataset.source = "cifar10";
        cfg.dataset.dir = data;
      }
      cfg.validate();
      const auto tv = train::load_dataset(cfg.dataset, cfg.seed);
      Rng rng(cfg.seed);
      model::VssdModel<float> net(train::effective_model(cfg), rng);
      fs::create_directories(out);
      std::ofstream(fs::path(out) / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
      const auto r = train::train_loop(net, cfg, tv, out, &std::cout);
      if (r.diverged) {
        std::cerr << "diverged: " << r.divergence_reason << '\n';
        return kDiverged;
      }
      std::cout << "final val accuracy " << r.final_val_acc << '\n';
      return 0;
    }

    if (*erfc) {
      const auto net = model::load_checkpoint<double>(ckpt);
      const std::size_t s = stage == 0 ? net.config().stages.size() - 1 : stage_arg(stage, net.config());
      auto files = image_files(images);
      if (limit > 0 && files.size() > limit) files.resize(limit);
      std::vector<Tensor<double>> imgs;
      for (const auto& f : files) imgs.push_back(standardized(f));
      const auto m = analysis::erf_map(analysis::model_features(net, s + 1), imgs);
      if (m.degenerate) std::cerr << "warning: saliency is zero everywhere; writing an all-zero map\n";
      analysis::write_pgm(out, log_scale ? m.log_grid : m.grid);
      std::cout << "erf over " << m.images << " images, output token (" << m.center_y << ", " << m.center_x << ") of "
                << m.out_h << "x" << m.out_w << " -> " << out << '\n';
      return 0;
    }

    if (*heatc) {
      const auto net = model::load_checkpoint<double>(ckpt);
      const auto x = standardized(image);
      const auto h = analysis::m_heatmap(net, x, stage_arg(stage, net.config()));
      const auto grid = upsample ? analysis::bilinear_upsample(h.normalized, x.dim(2), x.dim(3)) : h.normalized;
      analysis::write_pgm(out, grid);
      if (!overlay.empty()) {
        const auto raw = analysis::load_image(image);
        const auto heat = analysis::bilinear_upsample(h.normalized, x.dim(2), x.dim(3));
        Tensor<double> rgb({x.dim(2), x.dim(3), 3});
        for (std::size_t y = 0; y < x.dim(2); ++y)
          for (std::size_t xx = 0; xx < x.dim(3); ++xx)
            for (std::size_t c = 0; c < 3; ++c)
              rgb(y, xx, c) = 0.5 * raw(0, c, y, xx) + (c == 0 ? 0.5 * heat(y, xx) : 0.0);
        analysis::write_ppm(overlay, rgb);
      }
      std::cout << "stage " << stage << " grid " << h.raw.dim(0) << "x" << h.raw.dim(1)
                << (h.constant ? " (constant m)" : "") << " -> " << out << '\n';
      return 0;
    }

    if (*stabc) {
      auto pc = analysis::probe_config_from_json(read_json(config));
      if (no_m) pc.with_m = false;
      const auto t = analysis::stability_probe(pc);
      analysis::write_stability_csv(out, t);
      std::cout << (t.with_m ? "with m" : "m = 1") << ": " << t.completed_steps << " steps, " << t.rows.size()
                << " rows";
      if (t.divergence_step) std::cout << ", diverged at step " << *t.divergence_step << " (" << t.divergence_reason << ")";
      std::cout << '\n';
      if (!report.empty()) {
        auto other = pc;
        other.with_m = !pc.with_m;
        const auto u = analysis::stability_probe(other);
        const auto rep = t.with_m ? analysis::stability_report(t, u) : analysis::stability_report(u, t);
        std::ofstream(report) << rep.dump(2) << '\n';
      }
      return 0;
    }

    if (*exportc) {
      const auto any = nctd::read_any(in);
      nlohmann::json j;
      std::visit(
          [&](const auto& t) {
            using T = typename std::decay_t<decltype(t)>::value_type;
            j = {{"dtype", dtype_name(dtype_of<T>())}, {"shape", t.shape()}, {"data", t.storage()}};
          },
          any);
      if (out.empty()) std::cout << j.dump() << '\n';
      else std::ofstream(out) << j.dump() << '\n';
      return 0;
    }

    if (*importc) {
      const auto j = read_json(in);
      const std::string dt = dtype.empty() ? j.value("dtype", std::string("float64")) : dtype;
      const auto shape = j.at("shape").get<Shape>();
      const auto values = j.at("data").get<std::vector<double>>();
      if (dt == "float64") {
        nctd::write(out, Tensor<double>(shape, values));
      } else if (dt == "float32") {
        nctd::write(out, Tensor<float>(shape, std::vector<float>(values.begin(), values.end())));
      } else {
        throw ConfigError("dtype must be float32 or float64");
      }
      return 0;
    }

    if (*paramsc) {
      auto cfg = config.empty() ? model::variant(name, state_dim) : read_json(config).get<model::ModelConfig>();
      cfg.validate();
      const auto r = model::count_params_flops(cfg, image_size);
      if (as_json) {
        nlohmann::json stages = nlohmann::json::array();
        for (const auto& s : r.stages)
          stages.push_back({{"params", s.params}, {"macs", s.macs}, {"mixer_macs", s.mixer_macs}, {"H", s.H}, {"W", s.W}});
        std::cout << nlohmann::json{{"name", cfg.name}, {"image", image_size}, {"params", r.params},
                                    {"macs", r.macs}, {"flops", r.flops}, {"stages", stages}}
                         .dump(2)
                  << '\n';
      } else {
        std::cout << cfg.name << " @" << image_size << ": " << r.params / 1e6 << "M params, " << r.macs / 1e9
                  << "G MACs (" << r.flops / 1e9 << " GFLOPs at 2 per MAC)\n";
      }
      return 0;
    }
  } catch (const ResourceError& e) {
    std::cerr << "resource error: " << e.what() << '\n';
    return kResource;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
