#pragma once

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "vssd/core/blas.hpp"
#include "vssd/core/ops.hpp"
#include "vssd/core/rng.hpp"
#include "vssd/ncssd/autodiff.hpp"
#include "vssd/ssd/autodiff.hpp"

namespace vssd::bench {

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> v{"ssd", "bi-ssd", "nc-ssd-contraction", "nc-ssd-fused"};
  return v;
}

struct BenchSpec {
  std::string variant = "nc-ssd-fused";
  std::size_t L = 3136, N = 16, P = 24, heads = 2, batch = 8;
  std::string dtype = "float32";            // or "float64"
  std::string mode = "forward+backward";    // or "forward"
  std::size_t warmup = 3, iters = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (std::find(variant_names().begin(), variant_names().end(), variant) == variant_names().end()) {
      throw ConfigError("bench: unknown variant '" + variant + "'");
    }
    if (L == 0 || N == 0 || P == 0 || heads == 0) throw ConfigError("bench: L, N, P and heads must be positive");
    if (batch == 0) throw ConfigError("bench: batch must be positive");
    if (dtype != "float32" && dtype != "float64") throw ConfigError("bench: dtype must be float32 or float64");
    if (mode != "forward" && mode != "forward+backward") throw ConfigError("bench: mode must be forward or forward+backward");
    if (iters < 5) throw ConfigError("bench: at least 5 timed iterations are required");
    if (warmup < 1) throw ConfigError("bench: at least 1 warmup iteration is required");
    if (variant == "bi-ssd" && P % 2 != 0) throw ConfigError("bench: bi-ssd needs an even head width");
  }

  std::size_t element_size() const { return dtype == "float32" ? 4 : 8; }
};

struct HostInfo {
  std::string hostname, cpu;
  int threads = 1;
};

inline HostInfo host_info() {
  HostInfo h;
  char name[256] = {};
  if (gethostname(name, sizeof name - 1) == 0) h.hostname = name;
  std::ifstream f("/proc/cpuinfo");
  for (std::string line; std::getline(f, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto c = line.find(':');
      if (c != std::string::npos) h.cpu = line.substr(line.find_first_not_of(' ', c + 1));
      break;
    }
  }
  h.threads = configured_threads();
  return h;
}

struct BenchRecord {
  BenchSpec spec;
  double median_s = 0, iqr_s = 0, throughput = 0;  // throughput in sequences per second
  std::vector<double> times;
  std::uint64_t input_hash = 0;
  HostInfo host;
  std::string timestamp;
};

/// 64-bit FNV-1a, chained through `h`.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Linear-interpolated quantile of an unsorted sample.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw EvaluationError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

/// Upper bound on the bytes one iteration holds at once.
inline std::size_t estimate_bytes(const BenchSpec& s) {
  const std::size_t x = s.batch * s.L * s.heads * s.P, bc = 2 * s.batch * s.L * s.N, a = s.batch * s.L * s.heads;
  const bool bwd = s.mode == "forward+backward";
  std::size_t elems = x + bc + a + x /* cotangent */ + x /* output */;
  if (bwd) elems += x + bc + a + x;  // gradients, plus one gradient buffer for the output
  if (s.variant == "ssd" || s.variant == "bi-ssd") {
    if (bwd) elems += s.L * s.N * s.P + x;  // per-slice states and the re-run output
  } else if (s.variant == "nc-ssd-contraction") {
    elems += s.L * s.N * s.P + s.batch * s.heads * s.N * s.P;
  } else {
    elems += s.L * s.P + s.batch * s.heads * s.N * s.P;
  }
  return elems * s.element_size() * 3 / 2;
}

/// MemAvailable from /proc/meminfo, or 0 when it cannot be read.
inline std::size_t available_memory() {
  std::ifstream f("/proc/meminfo");
  for (std::string line; std::getline(f, line);) {
    if (line.rfind("MemAvailable:", 0) == 0) {
      std::istringstream is(line.substr(13));
      std::size_t kb = 0;
      is >> kb;
      return kb * 1024;
    }
  }
  return 0;
}

/// Throws ResourceError when s does not fit the budget; a zero budget
/// means 80% of currently available memory.
inline void check_resources(const BenchSpec& s, std::size_t budget = 0) {
  if (budget == 0) budget = available_memory() / 5 * 4;
  if (budget == 0) return;
  const std::size_t need = estimate_bytes(s);
  if (need > budget) {
    throw ResourceError("bench: " + s.variant + " at L=" + std::to_string(s.L) + " batch=" + std::to_string(s.batch) +
                        " needs about " + std::to_string(need >> 20) + " MiB, budget " + std::to_string(budget >> 20) +
                        " MiB");
  }
}

/// Inputs shared by every variant at one shape: X, B, C, the decay (A for the
/// causal scans, m for NC-SSD) and the output cotangent.
template <Real T>
struct BenchInputs {
  Tensor<T> X, B, C, A, G;

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* t : {&X, &B, &C, &A, &G}) h = fnv1a(t->ptr(), t->size() * sizeof(T), h);
    return h;
  }
};

template <Real T>
BenchInputs<T> make_inputs(const BenchSpec& s) {
  Rng rng(s.seed);
  BenchInputs<T> in{random_uniform<T>({s.batch, s.L, s.heads, s.P}, rng), random_uniform<T>({s.batch, s.L, s.N}, rng),
                    random_uniform<T>({s.batch, s.L, s.N}, rng), Tensor<T>({s.batch, s.L, s.heads}),
                    random_uniform<T>({s.batch, s.L, s.heads, s.P}, rng)};
  for (auto& v : in.A.data()) v = static_cast<T>(std::exp(-rng.uniform(0.01, 1.5)));
  return in;
}

template <Real T>
Var<T> run_variant(const std::string& v, Var<T> X, Var<T> B, Var<T> C, Var<T> A) {
  if (v == "ssd") return ssd::ssd_scan(X, B, C, A);
  if (v == "bi-ssd") return ssd::bi_ssd_scan(X, B, C, A);
  if (v == "nc-ssd-contraction") return ncssd::ncssd_contraction(X, B, C, A);
  if (v == "nc-ssd-fused") return ncssd::ncssd_fused(X, B, C, A);
  throw ConfigError("bench: unknown variant '" + v + "'");
}

/// One full kernel call: forward only, or forward plus backward to all four inputs.
template <Real T>
void iterate(const BenchSpec& s, const BenchInputs<T>& in) {
  Tape<T> tape;
  const bool bwd = s.mode == "forward+backward";
  if (!bwd) tape.set_grad_enabled(false);
  Var<T> y = run_variant<T>(s.variant, tape.leaf(in.X, bwd), tape.leaf(in.B, bwd), tape.leaf(in.C, bwd),
                            tape.leaf(in.A, bwd));
  if (bwd) tape.backward(ops::dot_const(y, in.G));
}

inline std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

template <Real T>
BenchRecord run_bench_typed(const BenchSpec& s) {
  const auto in = make_inputs<T>(s);
  BenchRecord r;
  r.spec = s;
  r.input_hash = in.hash();
  r.host = host_info();
  apply_thread_config();
  for (std::size_t i = 0; i < s.warmup; ++i) iterate(s, in);
  for (std::size_t i = 0; i < s.iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    iterate(s, in);
    const auto t1 = std::chrono::steady_clock::now();
    r.times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  r.median_s = quantile(r.times, 0.5);
  r.iqr_s = quantile(r.times, 0.75) - quantile(r.times, 0.25);
  r.throughput = double(s.batch) / r.median_s;
  r.timestamp = utc_timestamp();
  return r;
}

/// Validates, checks the memory budget, then times the variant.
inline BenchRecord run_bench(const BenchSpec& s, std::size_t memory_budget = 0) {
  s.validate();
  check_resources(s, memory_budget);
  return s.dtype == "float32" ? run_bench_typed<float>(s) : run_bench_typed<double>(s);
}

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> c{"variant", "mode",     "dtype",       "L",         "N",          "P",
                                          "heads",   "batch",    "warmup",      "iters",     "seed",       "threads",
                                          "median_s", "iqr_s",   "throughput_seq_per_s", "input_hash", "host", "cpu",
                                          "timestamp"};
  return c;
}

inline std::string csv_field(std::string s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string csv_row(const BenchRecord& r) {
  std::ostringstream o;
  o.precision(9);
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.input_hash));
  const auto& s = r.spec;
  o << s.variant << ',' << s.mode << ',' << s.dtype << ',' << s.L << ',' << s.N << ',' << s.P << ',' << s.heads << ','
    << s.batch << ',' << s.warmup << ',' << s.iters << ',' << s.seed << ',' << r.host.threads << ',' << r.median_s << ','
    << r.iqr_s << ',' << r.throughput << ',' << hash << ',' << csv_field(r.host.hostname) << ','
    << csv_field(r.host.cpu) << ',' << r.timestamp;
  return o.str();
}

/// Appends one row, writing the header first when the file is new or empty.
/// An existing header that differs from the schema is a format error.
inline void append_csv(const std::filesystem::path& path, const BenchRecord& r) {
  std::string header;
  for (const auto& c : csv_columns()) header += (header.empty() ? "" : ",") + c;
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  if (!fresh) {
    std::ifstream in(path);
    std::string first;
    std::getline(in, first);
    if (first != header) throw FormatError("bench: " + path.string() + " has a different column set");
  }
  std::ofstream f(path, std::ios::app);
  if (!f) throw FormatError("bench: cannot write " + path.string());
  if (fresh) f << header << '\n';
  f << csv_row(r) << '\n';
}

}  // namespace vssd::bench
