#pragma once

#include <cmath>
#include <limits>
#include <tuple>
#include <string>
#include <vector>

#include "vssd/core/conv.hpp"
#include "vssd/core/ops.hpp"
#include "vssd/core/rng.hpp"
#include "vssd/model/config.hpp"
#include "vssd/model/layers.hpp"
#include "vssd/model/params.hpp"
#include "vssd/ncssd/autodiff.hpp"
#include "vssd/ssd/autodiff.hpp"

namespace vssd::model {

inline constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

/// Per-block activation statistics and per-stage m maps collected during a forward pass.
template <Real T>
struct ForwardTrace {
  struct BlockStat {
    std::size_t stage = 0, block = 0;
    double mean_norm = 0, max_norm = 0;  // L2 norm per token, after the block
  };
  struct StageM {
    std::size_t stage = 0, H = 0, W = 0;
    Tensor<T> m;  // [B, H·W, heads], last m-producing block of the stage
  };
  std::vector<BlockStat> blocks;
  std::vector<StageM> m;
};

template <Real T>
struct ForwardOptions {
  bool training = false;          // enables drop-path
  Rng* rng = nullptr;             // drop-path masks; required when training with a non-zero rate
  ForwardTrace<T>* trace = nullptr;
};

/// y = x + DWConv3×3(x) on an NHWC grid.
template <Real T>
Var<T> lpu_forward(Var<T> x, Var<T> w, const std::type_identity_t<Var<T>>* bias) {
  return ops::add(x, ops::dwconv2d_nhwc(x, w, bias));
}

template <Real T>
class VssdModel {
 public:
  struct MixerIdx {
    std::size_t in_proj = kNone, conv_w = kNone, conv_b = kNone, x_proj = kNone, dt_bias = kNone, a_log = kNone,
                d_skip = kNone, out_proj = kNone;
    std::size_t qkv_w = kNone, qkv_b = kNone, proj_w = kNone, proj_b = kNone;
  };
  struct BlockIdx {
    std::size_t lpu1_w = kNone, lpu1_b = kNone, norm1_g, norm1_b;
    MixerIdx mixer;
    std::size_t lpu2_w = kNone, lpu2_b = kNone, norm2_g, norm2_b;
    std::size_t fc1_w, fc1_b, fc2_w, fc2_b;
    double drop_path = 0;
  };
  struct ConvNorm {
    std::size_t w, b, g, beta;
  };

  VssdModel(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  const std::vector<std::vector<BlockIdx>>& blocks() const { return blocks_; }

  /// x [B, in_channels, H, W] → logits [B, num_classes], or stage-4 features
  /// [B, H/32, W/32, C4] when num_classes = 0.
  Var<T> forward(Tape<T>& tape, const std::vector<Var<T>>& p, Var<T> x, const ForwardOptions<T>& opt = {}) const {
    Var<T> f = forward_features(tape, p, x, cfg_.stages.size(), opt);
    if (cfg_.num_classes == 0) return f;
    const std::size_t B = f.dim(0), L = f.dim(1) * f.dim(2), C = f.dim(3);
    Var<T> pooled = ops::mean_tokens(ops::reshape(f, {B, L, C}));
    pooled = ops::layer_norm(pooled, p[norm_g_], p[norm_b_], T(cfg_.norm_eps));
    return ops::linear(pooled, p[head_w_], p[head_b_]);
  }

  /// NHWC features after the first `stages` stages.
  Var<T> forward_features(Tape<T>& tape, const std::vector<Var<T>>& p, Var<T> x, std::size_t stages,
                          const ForwardOptions<T>& opt = {}) const {
    require_rank(x.shape(), 4, "model input");
    if (x.dim(1) != cfg_.in_channels) {
      throw DimensionError("model input has " + std::to_string(x.dim(1)) + " channels, expected " +
                           std::to_string(cfg_.in_channels));
    }
    if (p.size() != params_.size()) throw DimensionError("bound parameter count does not match the model");
    Var<T> h = stem_forward(p, ops::nchw_to_nhwc(x));
    for (std::size_t s = 0; s < std::min(stages, cfg_.stages.size()); ++s) {
      if (s > 0) h = downsample_forward(p, s, h);
      for (std::size_t b = 0; b < blocks_[s].size(); ++b) h = block_forward(tape, p, s, b, h, opt);
    }
    return h;
  }

  Var<T> stem_forward(const std::vector<Var<T>>& p, Var<T> x) const {
    if (cfg_.downsampling == Downsampling::Patch) {
      if (x.dim(1) % 4 != 0 || x.dim(2) % 4 != 0) throw ConfigError("patch stem needs spatial extents divisible by 4");
      return conv_norm(p, stem_[0], x, 4, 0, false);
    }
    Var<T> h = conv_norm(p, stem_[0], require_even(x, "stem"), 2, 1, true);
    return conv_norm(p, stem_[1], require_even(h, "stem"), 2, 1, true);
  }

  /// Downsampler in front of `stage` (1-based stages after the first).
  Var<T> downsample_forward(const std::vector<Var<T>>& p, std::size_t stage, Var<T> x) const {
    if (stage == 0 || stage >= cfg_.stages.size()) throw ConfigError("no downsampler before stage index " + std::to_string(stage));
    const ConvNorm& d = down_[stage - 1];
    require_even(x, "downsampler");
    return cfg_.downsampling == Downsampling::Patch ? conv_norm(p, d, x, 2, 0, false) : conv_norm(p, d, x, 2, 1, false);
  }

  /// One block on an NHWC grid: LPU, mixer, LPU, FFN, each with a skip connection.
  Var<T> block_forward(Tape<T>& tape, const std::vector<Var<T>>& p, std::size_t stage, std::size_t block, Var<T> x,
                       const ForwardOptions<T>& opt = {}) const {
    const BlockIdx& bi = blocks_.at(stage).at(block);
    const T eps = T(cfg_.norm_eps);
    if (bi.lpu1_w != kNone) x = lpu_forward(x, p[bi.lpu1_w], &p[bi.lpu1_b]);
    Var<T> u = ops::layer_norm(x, p[bi.norm1_g], p[bi.norm1_b], eps);
    x = ops::add(x, drop_path(mixer_forward(tape, p, stage, block, u, opt), bi.drop_path, opt));
    if (bi.lpu2_w != kNone) x = lpu_forward(x, p[bi.lpu2_w], &p[bi.lpu2_b]);
    Var<T> v = ops::layer_norm(x, p[bi.norm2_g], p[bi.norm2_b], eps);
    v = ops::linear(ops::gelu(ops::linear(v, p[bi.fc1_w], p[bi.fc1_b])), p[bi.fc2_w], p[bi.fc2_b]);
    x = ops::add(x, drop_path(v, bi.drop_path, opt));
    if (opt.trace) record_norms(*opt.trace, stage, block, x.value());
    return x;
  }

  /// Token mixer on a normalized NHWC grid [B, H, W, C] → [B, H, W, C].
  Var<T> mixer_forward(Tape<T>& tape, const std::vector<Var<T>>& p, std::size_t stage, std::size_t block, Var<T> u,
                       const ForwardOptions<T>& opt = {}) const {
    const StageSpec& st = cfg_.stages.at(stage);
    const MixerIdx& mi = blocks_.at(stage).at(block).mixer;
    require_rank(u.shape(), 4, "mixer input");
    const std::size_t B = u.dim(0), H = u.dim(1), W = u.dim(2), C = u.dim(3), L = H * W;
    if (st.mixer == Mixer::Msa) {
      Var<T> qkv = ops::linear(ops::reshape(u, {B, L, C}), p[mi.qkv_w], p[mi.qkv_b]);
      Var<T> a = ops::linear(multi_head_attention(qkv, st.heads), p[mi.proj_w], p[mi.proj_b]);
      return ops::reshape(a, {B, H, W, C});
    }
    const std::size_t D = cfg_.expand * C, Hd = st.heads, P = D / Hd, N = st.state_dim;
    Var<T> zx = ops::linear(u, p[mi.in_proj]);
    Var<T> z = ops::slice_lastdim(zx, 0, D);
    Var<T> v = ops::slice_lastdim(zx, D, 2 * D);
    if (mi.conv_w != kNone) v = ops::dwconv2d_nhwc(v, p[mi.conv_w], &p[mi.conv_b]);
    v = ops::reshape(ops::silu(v), {B, L, D});
    Var<T> proj = ops::linear(v, p[mi.x_proj]);
    Var<T> Bm = ops::slice_lastdim(proj, 0, N);
    Var<T> Cm = ops::slice_lastdim(proj, N, 2 * N);
    Var<T> m;
    if (st.mixer == Mixer::NcssdNoM) {
      m = tape.constant(Tensor<T>({B, L, Hd}, T(1)));
    } else {
      Var<T> delta = ops::softplus(ops::add_lastdim(ops::slice_lastdim(proj, 2 * N, 2 * N + Hd), p[mi.dt_bias]));
      m = ops::exp(ops::mul_lastdim(delta, ops::neg(ops::exp(p[mi.a_log]))));
    }
    Var<T> X = ops::reshape(v, {B, L, Hd, P});
    Var<T> Y;
    switch (st.mixer) {
      case Mixer::Ncssd:
      case Mixer::NcssdNoM: Y = ncssd::ncssd_fused(X, Bm, Cm, m); break;
      case Mixer::Ssd: Y = ssd::ssd_scan(scale_heads(X, m), Bm, Cm, m); break;
      case Mixer::BiSsd: Y = ssd::bi_ssd_scan(scale_heads(X, m), Bm, Cm, m); break;
      case Mixer::Msa: break;
    }
    Y = ops::add(Y, mul_heads(X, p[mi.d_skip]));
    Y = ops::reshape(Y, {B, H, W, D});
    if (cfg_.gate) Y = ops::mul(Y, ops::silu(z));
    if (opt.trace && st.mixer != Mixer::NcssdNoM) record_m(*opt.trace, stage, H, W, m.value());
    return ops::linear(Y, p[mi.out_proj]);
  }

 private:
  static Var<T> require_even(Var<T> x, const char* what) {
    if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
      throw ConfigError(std::string(what) + ": odd spatial extent " + std::to_string(x.dim(1)) + "×" +
                        std::to_string(x.dim(2)));
    }
    return x;
  }

  Var<T> conv_norm(const std::vector<Var<T>>& p, const ConvNorm& c, Var<T> x, std::size_t stride, std::size_t pad,
                   bool act) const {
    Var<T> h = ops::conv2d_nhwc(x, p[c.w], &p[c.b], stride, pad);
    h = ops::layer_norm(h, p[c.g], p[c.beta], T(cfg_.norm_eps));
    return act ? ops::gelu(h) : h;
  }

  Var<T> drop_path(Var<T> branch, double rate, const ForwardOptions<T>& opt) const {
    if (!opt.training || rate <= 0.0) return branch;
    if (!opt.rng) throw ConfigError("drop-path in training mode needs an rng");
    const std::size_t B = branch.dim(0);
    std::vector<T> keep(B);
    for (auto& k : keep) k = opt.rng->uniform() < rate ? T(0) : T(1.0 / (1.0 - rate));
    return ops::scale_rows(branch, std::move(keep));
  }

  static void record_norms(ForwardTrace<T>& tr, std::size_t stage, std::size_t block, const Tensor<T>& x) {
    const std::size_t C = x.shape().back(), tokens = x.size() / C;
    double sum = 0, mx = 0;
    bool nan = false;
    for (std::size_t i = 0; i < tokens; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += double(x[i * C + c]) * double(x[i * C + c]);
      const double n = std::sqrt(s);
      nan = nan || std::isnan(n);
      sum += n;
      mx = std::max(mx, n);
    }
    if (nan) mx = std::numeric_limits<double>::quiet_NaN();
    tr.blocks.push_back({stage, block, sum / double(tokens), mx});
  }

  static void record_m(ForwardTrace<T>& tr, std::size_t stage, std::size_t H, std::size_t W, const Tensor<T>& m) {
    for (auto& e : tr.m)
      if (e.stage == stage) {
        e = {stage, H, W, m};
        return;
      }
    tr.m.push_back({stage, H, W, m});
  }

  // -------------------------------------------------------------- init ---

  Tensor<T> linear_init(std::size_t out, std::size_t in, Rng& rng) { return truncated_normal<T>({out, in}, rng, 0.02); }

  std::size_t add(const std::string& name, Tensor<T> t, bool decay) { return params_.add(name, std::move(t), decay); }

  ConvNorm add_conv_norm(const std::string& prefix, const std::string& conv, const std::string& norm, std::size_t cin,
                         std::size_t cout, std::size_t k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(cin * k * k));
    ConvNorm c;
    c.w = add(prefix + conv + ".weight", random_uniform<T>({cout, k, k, cin}, rng, -bound, bound), true);
    c.b = add(prefix + conv + ".bias", random_uniform<T>({cout}, rng, -bound, bound), false);
    c.g = add(prefix + norm + ".weight", Tensor<T>({cout}, T(1)), false);
    c.beta = add(prefix + norm + ".bias", Tensor<T>({cout}, T(0)), false);
    return c;
  }

  std::pair<std::size_t, std::size_t> add_dwconv(const std::string& prefix, std::size_t ch, Rng& rng) {
    const double bound = 1.0 / 3.0;  // fan-in of a depthwise 3×3 kernel is 9
    const std::size_t w = add(prefix + ".weight", random_uniform<T>({ch, 3, 3}, rng, -bound, bound), true);
    const std::size_t b = add(prefix + ".bias", random_uniform<T>({ch}, rng, -bound, bound), false);
    return {w, b};
  }

  std::pair<std::size_t, std::size_t> add_norm(const std::string& prefix, std::size_t ch) {
    return {add(prefix + ".weight", Tensor<T>({ch}, T(1)), false), add(prefix + ".bias", Tensor<T>({ch}, T(0)), false)};
  }

  void build(Rng& rng) {
    const std::size_t C0 = cfg_.stages[0].channels;
    if (cfg_.downsampling == Downsampling::Patch) {
      stem_.push_back(add_conv_norm("stem.", "conv", "norm", cfg_.in_channels, C0, 4, rng));
    } else {
      stem_.push_back(add_conv_norm("stem.", "conv1", "norm1", cfg_.in_channels, C0 / 2, 3, rng));
      stem_.push_back(add_conv_norm("stem.", "conv2", "norm2", C0 / 2, C0, 3, rng));
    }
    const std::size_t depth = cfg_.depth();
    std::size_t global = 0;
    for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
      const StageSpec& st = cfg_.stages[s];
      const std::string sp = "stages." + std::to_string(s) + ".";
      if (s > 0) {
        const std::size_t k = cfg_.downsampling == Downsampling::Patch ? 2 : 3;
        down_.push_back(add_conv_norm(sp + "downsample.", "conv", "norm", cfg_.stages[s - 1].channels, st.channels, k, rng));
      }
      blocks_.emplace_back();
      for (std::size_t b = 0; b < st.blocks; ++b, ++global) {
        const std::string bp = sp + "blocks." + std::to_string(b) + ".";
        const std::size_t C = st.channels;
        BlockIdx bi;
        bi.drop_path = depth > 1 ? cfg_.drop_path_rate * double(global) / double(depth - 1) : 0.0;
        if (cfg_.lpu) std::tie(bi.lpu1_w, bi.lpu1_b) = add_dwconv(bp + "lpu1", C, rng);
        std::tie(bi.norm1_g, bi.norm1_b) = add_norm(bp + "norm1", C);
        bi.mixer = add_mixer(bp, st, rng);
        if (cfg_.lpu) std::tie(bi.lpu2_w, bi.lpu2_b) = add_dwconv(bp + "lpu2", C, rng);
        std::tie(bi.norm2_g, bi.norm2_b) = add_norm(bp + "norm2", C);
        const std::size_t F = cfg_.ffn_ratio * C;
        bi.fc1_w = add(bp + "ffn.fc1.weight", linear_init(F, C, rng), true);
        bi.fc1_b = add(bp + "ffn.fc1.bias", Tensor<T>({F}), false);
        bi.fc2_w = add(bp + "ffn.fc2.weight", linear_init(C, F, rng), true);
        bi.fc2_b = add(bp + "ffn.fc2.bias", Tensor<T>({C}), false);
        blocks_.back().push_back(bi);
      }
    }
    const std::size_t Cl = cfg_.stages.back().channels;
    if (cfg_.num_classes > 0) {
      std::tie(norm_g_, norm_b_) = add_norm("norm", Cl);
      head_w_ = add("head.weight", linear_init(cfg_.num_classes, Cl, rng), true);
      head_b_ = add("head.bias", Tensor<T>({cfg_.num_classes}), false);
    }
  }

  MixerIdx add_mixer(const std::string& bp, const StageSpec& st, Rng& rng) {
    MixerIdx mi;
    const std::size_t C = st.channels;
    if (st.mixer == Mixer::Msa) {
      const std::string ap = bp + "attn.";
      mi.qkv_w = add(ap + "qkv.weight", linear_init(3 * C, C, rng), true);
      mi.qkv_b = add(ap + "qkv.bias", Tensor<T>({3 * C}), false);
      mi.proj_w = add(ap + "proj.weight", linear_init(C, C, rng), true);
      mi.proj_b = add(ap + "proj.bias", Tensor<T>({C}), false);
      return mi;
    }
    const std::string mp = bp + "mixer.";
    const std::size_t D = cfg_.expand * C, Hd = st.heads, N = st.state_dim;
    const bool learned_m = st.mixer != Mixer::NcssdNoM;
    mi.in_proj = add(mp + "in_proj.weight", linear_init(2 * D, C, rng), true);
    if (cfg_.mixer_conv) std::tie(mi.conv_w, mi.conv_b) = add_dwconv(mp + "conv", D, rng);
    mi.x_proj = add(mp + "x_proj.weight", linear_init(2 * N + (learned_m ? Hd : 0), D, rng), true);
    if (learned_m) {
      Tensor<T> dt_bias({Hd}), a_log({Hd});
      for (std::size_t h = 0; h < Hd; ++h) {
        const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        dt_bias[h] = T(dt + std::log(-std::expm1(-dt)));  // softplus⁻¹(dt)
        a_log[h] = T(std::log(rng.uniform(1.0, 16.0)));
      }
      mi.dt_bias = add(mp + "dt_bias", std::move(dt_bias), false);
      mi.a_log = add(mp + "a_log", std::move(a_log), false);
    }
    mi.d_skip = add(mp + "D", Tensor<T>({Hd}, T(1)), false);
    mi.out_proj = add(mp + "out_proj.weight", linear_init(C, D, rng), true);
    return mi;
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
  std::vector<ConvNorm> stem_, down_;
  std::vector<std::vector<BlockIdx>> blocks_;
  std::size_t norm_g_ = kNone, norm_b_ = kNone, head_w_ = kNone, head_b_ = kNone;
};

/// Convenience no-grad forward pass for inference.
template <Real T>
Tensor<T> predict(const VssdModel<T>& model, const Tensor<T>& x, ForwardTrace<T>* trace = nullptr) {
  Tape<T> tape;
  NoGradGuard<T> guard(tape);
  auto p = model.params().bind(tape, false);
  ForwardOptions<T> opt;
  opt.trace = trace;
  return model.forward(tape, p, tape.leaf(x, false), opt).value();
}

}  // namespace vssd::model
