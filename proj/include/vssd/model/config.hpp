#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "vssd/core/error.hpp"

namespace vssd::model {

enum class Mixer {
  Ncssd,      // fused non-causal kernel with learned m
  NcssdNoM,   // same kernel with m ≡ 1
  Ssd,        // causal selective scan
  BiSsd,      // half the channels scanned forward, half backward
  Msa,        // softmax self-attention
};

enum class Downsampling {
  Overlapped,  // stem: two 3×3 stride-2 convs; between stages: 3×3 stride 2
  Patch,       // stem: 4×4 stride 4; between stages: 2×2 stride 2
};

inline const char* mixer_name(Mixer m) {
  switch (m) {
    case Mixer::Ncssd: return "ncssd";
    case Mixer::NcssdNoM: return "ncssd-no-m";
    case Mixer::Ssd: return "ssd";
    case Mixer::BiSsd: return "bi-ssd";
    case Mixer::Msa: return "msa";
  }
  return "?";
}

inline Mixer parse_mixer(const std::string& s) {
  for (Mixer m : {Mixer::Ncssd, Mixer::NcssdNoM, Mixer::Ssd, Mixer::BiSsd, Mixer::Msa})
    if (s == mixer_name(m)) return m;
  throw ConfigError("unknown mixer '" + s + "'");
}

struct StageSpec {
  std::size_t blocks = 1;
  std::size_t channels = 32;
  std::size_t heads = 1;
  Mixer mixer = Mixer::Ncssd;
  std::size_t state_dim = 16;
};

struct ModelConfig {
  std::string name = "custom";
  std::vector<StageSpec> stages;
  std::size_t in_channels = 3;
  std::size_t num_classes = 1000;
  std::size_t ffn_ratio = 4;
  std::size_t expand = 2;           // mixer inner width = expand × channels
  double drop_path_rate = 0.0;
  double norm_eps = 1e-5;
  Downsampling downsampling = Downsampling::Overlapped;
  bool lpu = true;                  // residual DWConv3×3 before each sub-block
  bool mixer_conv = true;           // DWConv3×3 on the mixer value path
  bool gate = true;                 // output multiplied by SiLU(z)

  std::size_t depth() const {
    std::size_t d = 0;
    for (const auto& s : stages) d += s.blocks;
    return d;
  }

  /// Total downsampling factor from input pixels to the last stage grid.
  std::size_t stride() const { return std::size_t{4} << (stages.empty() ? 0 : stages.size() - 1); }

  void validate() const {
    if (stages.empty()) throw ConfigError("model config '" + name + "' has no stages");
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    if (ffn_ratio == 0 || expand == 0) throw ConfigError("ffn_ratio and expand must be positive");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) throw ConfigError("drop_path_rate must lie in [0, 1)");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string where = "stage " + std::to_string(i + 1);
      if (s.blocks == 0 || s.channels == 0 || s.heads == 0) throw ConfigError(where + ": blocks, channels and heads must be positive");
      if (s.channels % s.heads != 0) {
        throw ConfigError(where + ": channels " + std::to_string(s.channels) + " not divisible by heads " +
                          std::to_string(s.heads));
      }
      if (s.mixer != Mixer::Msa) {
        if (s.state_dim == 0) throw ConfigError(where + ": state_dim must be positive");
        if ((expand * s.channels) % s.heads != 0) throw ConfigError(where + ": mixer width not divisible by heads");
        if (s.mixer == Mixer::BiSsd && ((expand * s.channels) / s.heads) % 2 != 0) {
          throw ConfigError(where + ": bi-ssd needs an even head width");
        }
      }
      if (s.mixer == Mixer::Msa && i + 1 != stages.size()) throw ConfigError(where + ": msa is only allowed in the last stage");
      if (i > 0 && s.channels != 2 * stages[i - 1].channels) {
        throw ConfigError(where + ": channels must double from the previous stage");
      }
      if (downsampling == Downsampling::Overlapped && i == 0 && s.channels % 2 != 0) {
        throw ConfigError("stage 1 channels must be even for the two-layer stem");
      }
    }
  }
};

/// Named variants: blocks / channels / heads per stage, NC-SSD in stages 1–3
/// and attention in stage 4.
inline ModelConfig variant(const std::string& name, std::size_t state_dim = 64) {
  struct Row {
    const char* name;
    std::size_t blocks[4], channels[4], heads[4];
    double drop_path;
  };
  static const Row rows[] = {
      {"micro", {2, 2, 8, 4}, {48, 96, 192, 384}, {2, 4, 8, 16}, 0.2},
      {"tiny", {2, 4, 8, 4}, {64, 128, 256, 512}, {2, 4, 8, 16}, 0.2},
      {"small", {3, 4, 18, 5}, {64, 128, 256, 512}, {2, 4, 8, 16}, 0.4},
      {"base", {3, 4, 18, 5}, {96, 192, 384, 768}, {3, 6, 12, 24}, 0.6},
  };
  for (const Row& r : rows) {
    if (name != r.name) continue;
    ModelConfig c;
    c.name = name;
    c.drop_path_rate = r.drop_path;
    for (int i = 0; i < 4; ++i)
      c.stages.push_back({r.blocks[i], r.channels[i], r.heads[i], i == 3 ? Mixer::Msa : Mixer::Ncssd, state_dim});
    return c;
  }
  throw ConfigError("unknown model variant '" + name + "' (micro, tiny, small, base)");
}

/// Two-stage desk configuration for 32×32 inputs.
inline ModelConfig desk_config(std::size_t num_classes = 10) {
  ModelConfig c;
  c.name = "desk";
  c.num_classes = num_classes;
  c.stages = {{2, 32, 2, Mixer::Ncssd, 16}, {2, 64, 4, Mixer::Ncssd, 16}};
  return c;
}

// JSON uses the field names blocks / channels / heads as per-stage arrays.
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  std::vector<std::size_t> blocks, channels, heads, state;
  std::vector<std::string> mixers;
  for (const auto& s : c.stages) {
    blocks.push_back(s.blocks);
    channels.push_back(s.channels);
    heads.push_back(s.heads);
    state.push_back(s.state_dim);
    mixers.push_back(mixer_name(s.mixer));
  }
  j = nlohmann::json{{"name", c.name},
                     {"blocks", blocks},
                     {"channels", channels},
                     {"heads", heads},
                     {"state_dim", state},
                     {"mixer", mixers},
                     {"in_channels", c.in_channels},
                     {"num_classes", c.num_classes},
                     {"ffn_ratio", c.ffn_ratio},
                     {"expand", c.expand},
                     {"drop_path_rate", c.drop_path_rate},
                     {"norm_eps", c.norm_eps},
                     {"downsampling", c.downsampling == Downsampling::Overlapped ? "overlapped" : "patch"},
                     {"lpu", c.lpu},
                     {"mixer_conv", c.mixer_conv},
                     {"gate", c.gate}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    if (j.contains("variant")) {
      c = variant(j.at("variant").get<std::string>(), j.value("state_dim_all", std::size_t{64}));
    } else {
      c = ModelConfig{};
    }
    c.name = j.value("name", c.name);
    if (j.contains("blocks")) {
      const auto blocks = j.at("blocks").get<std::vector<std::size_t>>();
      const auto channels = j.at("channels").get<std::vector<std::size_t>>();
      const auto heads = j.at("heads").get<std::vector<std::size_t>>();
      const std::size_t n = blocks.size();
      if (channels.size() != n || heads.size() != n) throw ConfigError("blocks, channels and heads must have equal length");
      std::vector<std::size_t> state(n, 16);
      if (j.contains("state_dim")) {
        if (j["state_dim"].is_array()) state = j["state_dim"].get<std::vector<std::size_t>>();
        else state.assign(n, j["state_dim"].get<std::size_t>());
      }
      std::vector<std::string> mixers(n, "ncssd");
      if (j.contains("mixer")) {
        if (j["mixer"].is_array()) mixers = j["mixer"].get<std::vector<std::string>>();
        else mixers.assign(n, j["mixer"].get<std::string>());
      }
      if (state.size() != n || mixers.size() != n) throw ConfigError("state_dim / mixer length mismatch");
      c.stages.clear();
      for (std::size_t i = 0; i < n; ++i) c.stages.push_back({blocks[i], channels[i], heads[i], parse_mixer(mixers[i]), state[i]});
    }
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.expand = j.value("expand", c.expand);
    c.drop_path_rate = j.value("drop_path_rate", c.drop_path_rate);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    if (j.contains("downsampling")) {
      const auto s = j["downsampling"].get<std::string>();
      if (s != "overlapped" && s != "patch") throw ConfigError("downsampling must be 'overlapped' or 'patch'");
      c.downsampling = s == "patch" ? Downsampling::Patch : Downsampling::Overlapped;
    }
    c.lpu = j.value("lpu", c.lpu);
    c.mixer_conv = j.value("mixer_conv", c.mixer_conv);
    c.gate = j.value("gate", c.gate);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

}  // namespace vssd::model
