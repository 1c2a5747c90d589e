#pragma once

#include <string>
#include <vector>

#include "vssd/model/config.hpp"

namespace vssd::model {

struct StageCost {
  std::size_t params = 0;
  double macs = 0;        // whole stage including its downsampler
  double mixer_macs = 0;  // token mixers only
  std::size_t H = 0, W = 0;
};

struct ParamFlopReport {
  std::size_t params = 0;
  double macs = 0;   // multiply-accumulates
  double flops = 0;  // 2 × macs
  std::size_t image = 0;
  std::vector<StageCost> stages;
};

/// Multiply-accumulates of one token mixer at L tokens (projections included,
/// elementwise work excluded). The NC-SSD term is 2·L·N·D: building H and
/// reading it out. Attention adds 2·L²·C for scores and the weighted sum.
inline double mixer_macs(const ModelConfig& cfg, const StageSpec& st, double L) {
  const double C = double(st.channels);
  if (st.mixer == Mixer::Msa) return L * C * 3 * C + 2 * L * L * C + L * C * C;
  const double D = double(cfg.expand) * C, N = double(st.state_dim), Hd = double(st.heads);
  const double dt = st.mixer == Mixer::NcssdNoM ? 0 : Hd;
  double m = L * C * 2 * D + L * D * (2 * N + dt) + 2 * L * N * D + L * D * C;
  if (cfg.mixer_conv) m += L * D * 9;
  return m;
}

inline std::size_t mixer_params(const ModelConfig& cfg, const StageSpec& st) {
  const std::size_t C = st.channels;
  if (st.mixer == Mixer::Msa) return 3 * C * C + 3 * C + C * C + C;
  const std::size_t D = cfg.expand * C, N = st.state_dim, Hd = st.heads;
  const bool learned_m = st.mixer != Mixer::NcssdNoM;
  std::size_t p = 2 * D * C + D * (2 * N + (learned_m ? Hd : 0)) + Hd + C * D;
  if (cfg.mixer_conv) p += 10 * D;
  if (learned_m) p += 2 * Hd;
  return p;
}

/// Analytic parameter and compute totals for an image × image input.
inline ParamFlopReport count_params_flops(const ModelConfig& cfg, std::size_t image = 224) {
  cfg.validate();
  ParamFlopReport r;
  r.image = image;
  auto conv = [](std::size_t cin, std::size_t cout, std::size_t k) { return cout * k * k * cin + cout + 2 * cout; };
  const std::size_t C0 = cfg.stages[0].channels;
  std::size_t H = image, W = image;
  if (cfg.downsampling == Downsampling::Patch) {
    H /= 4;
    W /= 4;
    r.params += conv(cfg.in_channels, C0, 4);
    r.macs += double(H * W) * 16 * double(cfg.in_channels * C0);
  } else {
    H /= 2;
    W /= 2;
    r.params += conv(cfg.in_channels, C0 / 2, 3);
    r.macs += double(H * W) * 9 * double(cfg.in_channels * (C0 / 2));
    H /= 2;
    W /= 2;
    r.params += conv(C0 / 2, C0, 3);
    r.macs += double(H * W) * 9 * double((C0 / 2) * C0);
  }
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageSpec& st = cfg.stages[s];
    const std::size_t C = st.channels;
    StageCost sc;
    if (s > 0) {
      const std::size_t k = cfg.downsampling == Downsampling::Patch ? 2 : 3;
      H /= 2;
      W /= 2;
      sc.params += conv(cfg.stages[s - 1].channels, C, k);
      sc.macs += double(H * W) * double(k * k) * double(cfg.stages[s - 1].channels * C);
    }
    const double L = double(H * W);
    const std::size_t F = cfg.ffn_ratio * C;
    std::size_t block_params = 2 * 2 * C + mixer_params(cfg, st) + F * C + F + C * F + C;
    double block_macs = mixer_macs(cfg, st, L) + 2 * L * C * double(F);
    if (cfg.lpu) {
      block_params += 2 * 10 * C;
      block_macs += 2 * L * double(C) * 9;
    }
    sc.params += st.blocks * block_params;
    sc.macs += double(st.blocks) * block_macs;
    sc.mixer_macs = double(st.blocks) * mixer_macs(cfg, st, L);
    sc.H = H;
    sc.W = W;
    r.params += sc.params;
    r.macs += sc.macs;
    r.stages.push_back(sc);
  }
  if (cfg.num_classes > 0) {
    const std::size_t C = cfg.stages.back().channels;
    r.params += 2 * C + cfg.num_classes * C + cfg.num_classes;
    r.macs += double(C * cfg.num_classes);
  }
  r.flops = 2 * r.macs;
  return r;
}

}  // namespace vssd::model
