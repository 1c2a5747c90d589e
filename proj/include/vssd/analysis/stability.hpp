#pragma once

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "vssd/train/loop.hpp"

namespace vssd::analysis {

struct ProbeConfig {
  train::TrainConfig train;  // model, data, batch size, lr, seed
  std::size_t steps = 50;
  std::size_t log_every = 1;
  bool with_m = true;

  void validate() const {
    if (steps == 0) throw ConfigError("stability: steps must be positive");
    if (log_every == 0) throw ConfigError("stability: log_every must be positive");
    train.validate();
  }
};

/// Flat JSON: every training field plus "steps", "log_every", "with_m".
inline ProbeConfig probe_config_from_json(const nlohmann::json& j) {
  ProbeConfig p;
  j.get_to(p.train);
  try {
    p.steps = j.value("steps", p.steps);
    p.log_every = j.value("log_every", p.log_every);
    p.with_m = j.value("with_m", p.with_m);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("stability config: ") + e.what());
  }
  return p;
}

struct StabilityRow {
  std::size_t step = 0, stage = 0, block = 0;
  double mean_norm = 0, max_norm = 0, loss = 0;
};

struct StabilityTrace {
  bool with_m = true;
  std::size_t blocks = 0;  // blocks per logged step
  std::size_t logged_steps = 0, completed_steps = 0;
  std::vector<StabilityRow> rows;
  std::vector<double> losses;  // every completed step
  std::optional<std::size_t> divergence_step;
  std::string divergence_reason;

  /// Final logged max norm per block, or empty when nothing was logged.
  std::vector<double> last_max_norms() const {
    if (logged_steps == 0) return {};
    std::vector<double> v;
    for (std::size_t i = rows.size() - blocks; i < rows.size(); ++i) v.push_back(rows[i].max_norm);
    return v;
  }
};

/// The model the probe trains: every NC-SSD stage becomes its m ≡ 1 ablation
/// when with_m is false.
inline model::ModelConfig probe_model(const ProbeConfig& c) {
  model::ModelConfig m = train::effective_model(c.train);
  if (!c.with_m)
    for (auto& st : m.stages)
      if (st.mixer == model::Mixer::Ncssd) st.mixer = model::Mixer::NcssdNoM;
  return m;
}

/// Trains for `steps` optimizer steps at a constant learning rate, logging
/// per-block activation norms. Divergence (non-finite loss or activations)
/// stops the run and is recorded.
inline StabilityTrace stability_probe(const ProbeConfig& c) {
  c.validate();
  const auto data = train::load_dataset(c.train.dataset, c.train.seed);
  Rng rng(c.train.seed);
  model::VssdModel<double> net(probe_model(c), rng);
  train::AdamWConfig ocfg;
  ocfg.beta1 = c.train.betas[0];
  ocfg.beta2 = c.train.betas[1];
  ocfg.weight_decay = c.train.weight_decay;
  train::AdamW<double> opt(net.params(), ocfg);

  StabilityTrace tr;
  tr.with_m = c.with_m;
  tr.blocks = net.config().depth();
  const std::size_t n = data.train.count, bs = std::min(c.train.batch_size, n);
  std::vector<std::size_t> order;
  std::size_t cursor = n;
  for (std::size_t step = 0; step < c.steps; ++step) {
    if (cursor + bs > n) {
      order = rng.permutation(n);
      cursor = 0;
    }
    std::vector<std::size_t> idx(order.begin() + cursor, order.begin() + cursor + bs);
    cursor += bs;
    const bool log = step % c.log_every == 0;
    model::ForwardTrace<double> ft;
    double loss = std::numeric_limits<double>::quiet_NaN();
    try {
      loss = train::train_step(net, opt, data.train.images<double>(idx), data.train.labels_of(idx), c.train.lr,
                               c.train.label_smoothing, rng, &ft);
    } catch (const train::DivergenceError& e) {
      tr.divergence_reason = e.what();
    }
    bool finite = std::isfinite(loss);
    for (const auto& b : ft.blocks) finite = finite && std::isfinite(b.max_norm);
    if (log && ft.blocks.size() == tr.blocks) {
      for (const auto& b : ft.blocks) tr.rows.push_back({step, b.stage, b.block, b.mean_norm, b.max_norm, loss});
      ++tr.logged_steps;
    }
    if (!finite) {
      tr.divergence_step = step;
      if (tr.divergence_reason.empty()) tr.divergence_reason = "non-finite activations";
      break;
    }
    tr.losses.push_back(loss);
    ++tr.completed_steps;
  }
  return tr;
}

inline void write_stability_csv(const std::filesystem::path& path, const StabilityTrace& t) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f.precision(10);
  f << "step,with_m,stage,block,mean_norm,max_norm,loss\n";
  for (const auto& r : t.rows) {
    f << r.step << ',' << (t.with_m ? 1 : 0) << ',' << r.stage << ',' << r.block << ',' << r.mean_norm << ','
      << r.max_norm << ',' << r.loss << '\n';
  }
  if (!f) throw FormatError("write failed for " + path.string());
}

/// Side-by-side summary of a with-m and an m ≡ 1 run.
inline nlohmann::json stability_report(const StabilityTrace& with_m, const StabilityTrace& without_m) {
  auto one = [](const StabilityTrace& t) {
    nlohmann::json j = {{"with_m", t.with_m},
                        {"completed_steps", t.completed_steps},
                        {"logged_steps", t.logged_steps},
                        {"diverged", t.divergence_step.has_value()},
                        {"final_loss", t.losses.empty() ? nlohmann::json(nullptr) : nlohmann::json(t.losses.back())}};
    if (t.divergence_step) {
      j["divergence_step"] = *t.divergence_step;
      j["divergence_reason"] = t.divergence_reason;
    }
    nlohmann::json norms = nlohmann::json::array();
    for (double v : t.last_max_norms()) norms.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
    j["final_max_norms"] = norms;
    return j;
  };
  return {{"with_m", one(with_m)}, {"without_m", one(without_m)}};
}

}  // namespace vssd::analysis
