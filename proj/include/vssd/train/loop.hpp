#pragma once

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "vssd/model/checkpoint.hpp"
#include "vssd/model/vssd.hpp"
#include "vssd/train/data.hpp"
#include "vssd/train/optim.hpp"

namespace vssd::train {

struct DatasetSpec {
  std::string source = "synthetic";  // "cifar10" or "synthetic"
  std::string dir;                   // cifar10 binary directory
  std::size_t image_size = 32;
  std::size_t classes = 10;
  std::size_t train_count = 0;  // 0 keeps everything; otherwise the first n examples
  std::size_t val_count = 0;
  double noise = 0.35;          // synthetic only
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t warmup_epochs = 1;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::vector<double> betas{0.9, 0.999};
  double label_smoothing = 0.1;
  std::optional<double> ema_decay;
  std::uint64_t seed = 0;
  std::optional<double> drop_path_rate;  // overrides the model's rate when set
  bool flip = true;
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 3;
  DatasetSpec dataset;
  model::ModelConfig model = model::desk_config(10);

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("label_smoothing must lie in [0, 1)");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (betas.size() != 2 || !(betas[0] >= 0 && betas[0] < 1 && betas[1] >= 0 && betas[1] < 1)) {
      throw ConfigError("betas must be two values in [0, 1)");
    }
    if (ema_decay && !(*ema_decay >= 0 && *ema_decay <= 1)) throw ConfigError("ema_decay must lie in [0, 1]");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (dataset.source != "synthetic" && dataset.source != "cifar10") {
      throw ConfigError("dataset.source must be 'cifar10' or 'synthetic'");
    }
    model.validate();
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
  j = {{"source", d.source}, {"dir", d.dir}, {"image_size", d.image_size}, {"classes", d.classes},
       {"train_count", d.train_count}, {"val_count", d.val_count}, {"noise", d.noise}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& d) {
  d = DatasetSpec{};
  d.source = j.value("source", d.source);
  d.dir = j.value("dir", d.dir);
  d.image_size = j.value("image_size", d.image_size);
  d.classes = j.value("classes", d.classes);
  d.train_count = j.value("train_count", d.train_count);
  d.val_count = j.value("val_count", d.val_count);
  d.noise = j.value("noise", d.noise);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"warmup_epochs", c.warmup_epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"betas", c.betas},
       {"label_smoothing", c.label_smoothing},
       {"ema_decay", c.ema_decay ? nlohmann::json(*c.ema_decay) : nlohmann::json(nullptr)},
       {"seed", c.seed},
       {"drop_path_rate", c.drop_path_rate ? nlohmann::json(*c.drop_path_rate) : nlohmann::json(nullptr)},
       {"flip", c.flip},
       {"checkpoint_every", c.checkpoint_every},
       {"dataset", c.dataset},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    c = TrainConfig{};
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.betas = j.value("betas", c.betas);
    c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
    if (j.contains("ema_decay") && !j["ema_decay"].is_null()) c.ema_decay = j["ema_decay"].get<double>();
    c.seed = j.value("seed", c.seed);
    if (j.contains("drop_path_rate") && !j["drop_path_rate"].is_null()) c.drop_path_rate = j["drop_path_rate"].get<double>();
    c.flip = j.value("flip", c.flip);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("dataset")) c.dataset = j["dataset"].get<DatasetSpec>();
    if (j.contains("model")) c.model = j["model"].get<model::ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

/// Model configuration with the training overrides applied.
inline model::ModelConfig effective_model(const TrainConfig& c) {
  model::ModelConfig m = c.model;
  if (c.drop_path_rate) m.drop_path_rate = *c.drop_path_rate;
  m.num_classes = c.dataset.classes;
  return m;
}

/// Loads or generates the train/val split described by d.
inline TrainVal load_dataset(const DatasetSpec& d, std::uint64_t seed) {
  TrainVal tv;
  if (d.source == "cifar10") {
    tv = load_cifar10_binary(d.dir);
  } else {
    SyntheticSpec s;
    s.classes = d.classes;
    s.size = d.image_size;
    s.noise = d.noise;
    s.seed = seed;
    s.sample_seed = seed * 2 + 1;
    s.count = d.train_count ? d.train_count : 512;
    tv.train = synthetic_dataset(s);
    s.sample_seed = seed * 2 + 2;
    s.count = d.val_count ? d.val_count : 256;
    tv.val = synthetic_dataset(s);
  }
  auto trim = [](Dataset& ds, std::size_t n) {
    if (n == 0 || n >= ds.count) return;
    ds.count = n;
    ds.pixels.resize(n * ds.image_bytes());
    ds.labels.resize(n);
  };
  trim(tv.train, d.train_count);
  trim(tv.val, d.val_count);
  return tv;
}

struct EpochMetrics {
  std::size_t epoch = 0, step = 0;
  double lr = 0, train_loss = 0, val_acc = 0, wall_seconds = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::vector<double> step_losses;
  bool diverged = false;
  std::string divergence_reason;
  std::size_t steps = 0;
  double final_val_acc = 0;
};

/// One optimizer step on a batch; returns the loss before the update.
template <Real T>
double train_step(model::VssdModel<T>& net, AdamW<T>& opt, const Tensor<T>& x, const std::vector<std::size_t>& labels,
                  double lr, double smoothing, Rng& rng, model::ForwardTrace<T>* trace = nullptr) {
  Tape<T> tape;
  auto p = net.params().bind(tape, true);
  model::ForwardOptions<T> fo;
  fo.training = true;
  fo.rng = &rng;
  fo.trace = trace;
  Var<T> loss = label_smoothing_ce(net.forward(tape, p, tape.leaf(x, false), fo), labels, smoothing);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) throw DivergenceError("non-finite loss");
  tape.backward(loss);
  std::vector<Tensor<T>> grads;
  grads.reserve(p.size());
  for (const auto& v : p) grads.push_back(tape.grad(v));
  opt.step(net.params(), grads, lr);
  return value;
}

/// Top-1 accuracy over the whole dataset, evaluated without gradients.
template <Real T>
double evaluate(const model::VssdModel<T>& net, const Dataset& ds, std::size_t batch = 256) {
  if (ds.count == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t s = 0; s < ds.count; s += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(ds.count, s + batch); ++i) idx.push_back(i);
    const auto logits = model::predict(net, ds.images<T>(idx));
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::size_t arg = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits(b, k) > logits(b, arg)) arg = k;
      correct += arg == ds.labels[idx[b]];
    }
  }
  return double(correct) / double(ds.count);
}

inline void write_metrics_header(std::ostream& os) { os << "epoch,step,lr,train_loss,val_acc,wall_seconds\n"; }

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os << m.epoch << ',' << m.step << ',' << m.lr << ',' << m.train_loss << ',' << m.val_acc << ',' << m.wall_seconds
     << '\n';
  os.flush();
}

/// Full training run. When out_dir is non-empty, writes metrics.csv,
/// periodic and final checkpoints, and (when EMA is on) an EMA checkpoint.
template <Real T>
TrainResult train_loop(model::VssdModel<T>& net, const TrainConfig& cfg, const TrainVal& data,
                       const std::filesystem::path& out_dir = {}, std::ostream* log = nullptr) {
  cfg.validate();
  const auto& mc = net.config();
  if (data.train.count == 0) throw ConfigError("training set is empty");
  if (data.train.channels != mc.in_channels) throw ConfigError("dataset channels do not match the model");
  if (data.train.classes != mc.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.train.classes) + " classes, model head has " +
                      std::to_string(mc.num_classes));
  }
  if (data.train.height % mc.stride() != 0 || data.train.width % mc.stride() != 0) {
    throw ConfigError("image size " + std::to_string(data.train.height) + " is not divisible by the model stride " +
                      std::to_string(mc.stride()));
  }

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open(out_dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw FormatError("cannot write " + (out_dir / "metrics.csv").string());
    write_metrics_header(csv);
  }

  AdamW<T> opt(net.params(), AdamWConfig{cfg.betas[0], cfg.betas[1], 1e-8, cfg.weight_decay});
  std::optional<Ema<T>> ema;
  if (cfg.ema_decay) ema.emplace(net.params(), *cfg.ema_decay);
  Rng rng(cfg.seed);
  const std::size_t per_epoch = (data.train.count + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs, warmup = per_epoch * cfg.warmup_epochs;
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult r;
  double initial = 0;
  std::size_t over = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !r.diverged; ++epoch) {
    const auto order = rng.permutation(data.train.count);
    double sum = 0;
    std::size_t batches = 0;
    double lr = 0;
    for (std::size_t s = 0; s < data.train.count; s += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + s, order.begin() + std::min(data.train.count, s + cfg.batch_size));
      std::vector<bool> flip(idx.size(), false);
      if (cfg.flip)
        for (std::size_t i = 0; i < idx.size(); ++i) flip[i] = rng.uniform() < 0.5;
      lr = cosine_schedule(r.steps, total, warmup, cfg.lr);
      double loss;
      try {
        loss = train_step(net, opt, data.train.images<T>(idx, flip), data.train.labels_of(idx), lr,
                          cfg.label_smoothing, rng);
      } catch (const DivergenceError& e) {
        r.diverged = true;
        r.divergence_reason = std::string(e.what()) + " at step " + std::to_string(r.steps);
        break;
      }
      if (r.steps == 0) initial = loss;
      r.step_losses.push_back(loss);
      ++r.steps;
      if (ema) ema->update(net.params());
      sum += loss;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.step = r.steps;
    m.lr = lr;
    m.train_loss = batches ? sum / double(batches) : std::nan("");
    m.val_acc = r.diverged ? 0.0 : evaluate(net, data.val);
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.epochs.push_back(m);
    if (csv.is_open()) write_metrics_row(csv, m);
    if (log) *log << "epoch " << epoch << " loss " << m.train_loss << " val_acc " << m.val_acc << " lr " << lr << '\n';
    if (!r.diverged) {
      over = m.train_loss > cfg.divergence_factor * initial ? over + 1 : 0;
      if (over >= cfg.divergence_patience) {
        r.diverged = true;
        r.divergence_reason = "loss above " + std::to_string(cfg.divergence_factor) + "x the initial loss for " +
                              std::to_string(over) + " epochs";
      }
    }
    if (!out_dir.empty() && cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0 && !r.diverged) {
      model::save_checkpoint(out_dir / ("checkpoint_epoch" + std::to_string(epoch)), net,
                             {{"epoch", epoch}, {"step", r.steps}, {"rng_state", rng.state()}});
    }
  }
  r.final_val_acc = r.epochs.empty() ? 0.0 : r.epochs.back().val_acc;
  if (!out_dir.empty()) {
    nlohmann::json meta{{"epochs", r.epochs.size()}, {"step", r.steps}, {"diverged", r.diverged}, {"rng_state", rng.state()}};
    if (r.diverged) meta["divergence_reason"] = r.divergence_reason;
    model::save_checkpoint(out_dir / "checkpoint", net, meta);
    if (ema) {
      model::VssdModel<T> shadow = net;
      ema->copy_to(shadow.params());
      model::save_checkpoint(out_dir / "checkpoint_ema", shadow, meta);
    }
  }
  return r;
}

}  // namespace vssd::train
