#pragma once

// Structure encoder and conditional denoiser.
//
// Both branches share one stage layout. A 3x3 stem feeds five stages; stage
// 1 is three residual conv blocks, stages 2-5 are three Swin blocks each,
// and every stage ends in a stride-2 downsample with a 1x1 shortcut. The
// structure encoder's stage outputs f_1..f_5 are fused into the matching
// denoiser stage (addition or cross-attention, then the projector). Two
// Swin blocks sit in the middle; the decoder mirrors the encoder with
// nearest x2 upsampling + 3x3 conv and concatenating skip connections.
//
// Parameter names:
//   structure.stem.{w,b}, structure.s{i}.{conv,swin}{j}.*, structure.s{i}.down.*
//   denoiser.enc.stem.*, denoiser.enc.s{i}.*          (same layout as above)
//   denoiser.time.{w1,b1,w2,b2}
//   fusion.s{i}.{w_q,w_k,w_v}, projector.s{i}.{down,up}.{w,b}
//   denoiser.mid.swin{j}.*
//   denoiser.dec.s{i}.{merge,up}.*, denoiser.dec.s{i}.{conv,swin}{j}.*
//   denoiser.head.{merge,norm,out}.*

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dosediff/attention.hpp"
#include "dosediff/diffusion.hpp"

namespace dosediff::model {

inline constexpr std::size_t kStages = 5;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FusionStrategy {
  enum class Mode { Concatenate, AddAll, AttnAll, AttnLast };
  Mode mode = Mode::AttnLast;
  int k = 2;  // used by AttnLast; 0 degenerates to AddAll

  static FusionStrategy concatenate() { return {Mode::Concatenate, 0}; }
  static FusionStrategy add_all() { return {Mode::AddAll, 0}; }
  static FusionStrategy attn_all() { return {Mode::AttnAll, 0}; }
  static FusionStrategy attn_last(int k) { return {Mode::AttnLast, k}; }

  void validate() const {
    if (mode == Mode::AttnLast && (k < 0 || k > static_cast<int>(kStages))) {
      throw ConfigError("fusion: attn-last K must be in [0, 5], got " + std::to_string(k));
    }
  }

  /// Stage index is 1-based. "Last K" are the K lowest-resolution stages.
  bool uses_attention(std::size_t stage) const {
    switch (mode) {
      case Mode::AttnAll:
        return true;
      case Mode::AttnLast:
        return static_cast<int>(stage) > static_cast<int>(kStages) - k;
      default:
        return false;
    }
  }

  bool per_stage_fusion() const { return mode != Mode::Concatenate; }

  std::string name() const {
    switch (mode) {
      case Mode::Concatenate:
        return "concatenate";
      case Mode::AddAll:
        return "add-all";
      case Mode::AttnAll:
        return "attn-all";
      case Mode::AttnLast:
        return "attn-last" + std::to_string(k);
    }
    return "?";
  }

  static FusionStrategy parse(const std::string& s) {
    if (s == "concatenate") return concatenate();
    if (s == "add-all") return add_all();
    if (s == "attn-all") return attn_all();
    const std::string prefix = "attn-last";
    if (s.rfind(prefix, 0) == 0 && s.size() > prefix.size()) {
      const std::string digits = s.substr(prefix.size());
      if (digits.find_first_not_of("0123456789") == std::string::npos && digits.size() <= 2) {
        FusionStrategy f = attn_last(std::stoi(digits));
        f.validate();
        return f;
      }
    }
    throw ConfigError("unknown fusion strategy '" + s + "'");
  }

  bool operator==(const FusionStrategy&) const = default;
};

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t oar_count = 3;
  std::size_t base_channels = 8;
  std::array<std::size_t, kStages> multipliers{1, 2, 4, 8, 8};
  std::size_t window = 4;
  std::size_t heads = 4;
  std::size_t projector_ratio = 4;
  bool use_projector = true;
  FusionStrategy fusion = FusionStrategy::attn_last(2);
  std::size_t blocks_per_stage = 3;
  std::size_t middle_blocks = 2;
  std::size_t mlp_ratio = 2;
  std::size_t time_dim = 0;  // 0 means 4 * base_channels

  std::size_t condition_channels() const { return 2 + oar_count; }
  std::size_t embedding_dim() const { return time_dim == 0 ? 4 * base_channels : time_dim; }

  /// Channels at level i: 0 is the stem, 1..5 the stage outputs.
  std::size_t channels(std::size_t level) const {
    return level == 0 ? base_channels : base_channels * multipliers[level - 1];
  }

  /// Spatial side at level i: H at 0, then ceil-halved per stage.
  std::size_t side(std::size_t level) const {
    std::size_t s = image_size;
    for (std::size_t i = 0; i < level; ++i) s = (s + 1) / 2;
    return s;
  }

  /// Window used by Swin blocks running at the given side.
  std::size_t window_at(std::size_t side_len) const { return std::min(window, side_len); }

  void validate() const {
    if (image_size < 16 || image_size % 16 != 0) {
      throw ConfigError("image_size must be a positive multiple of 16, got " + std::to_string(image_size));
    }
    if (oar_count < 1) throw ConfigError("oar_count must be >= 1");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
    if (window < 1) throw ConfigError("window must be >= 1");
    for (std::size_t m : multipliers)
      if (m < 1) throw ConfigError("stage multipliers must be >= 1");
    for (std::size_t level = 0; level <= kStages; ++level) {
      const std::size_t c = channels(level);
      if (heads == 0 || c % heads != 0) {
        throw ConfigError("heads (" + std::to_string(heads) + ") must divide channel count " + std::to_string(c));
      }
      const std::size_t s = side(level);
      if (s % window_at(s) != 0) {
        throw ConfigError("window " + std::to_string(window) + " does not divide side " + std::to_string(s));
      }
      if (use_projector && level > 0 && (projector_ratio == 0 || c % projector_ratio != 0)) {
        throw ConfigError("projector ratio " + std::to_string(projector_ratio) + " does not divide " +
                          std::to_string(c));
      }
    }
    if (embedding_dim() % 2 != 0) throw ConfigError("time embedding dim must be even");
    fusion.validate();
  }
};

/// Structural input plus its per-stage feature maps. Empty `features` means
/// the pure denoiser path (no per-stage fusion).
struct ConditionStack {
  Tensor y;
  std::vector<Tensor> features;  // f_1..f_5
};

// ---------------------------------------------------------------------------
// Blocks.

struct ConvBlockParams {
  Tensor norm_g, norm_b, w, b;
  Tensor time_w, time_b;
};

struct DownParams {
  Tensor w3, b3, w1, b1;
};

struct StageParams {
  std::vector<ConvBlockParams> conv;
  std::vector<nn::SwinBlockParams> swin;
  DownParams down;
};

struct EncoderParams {
  Tensor stem_w, stem_b;
  std::array<StageParams, kStages> stages;
};

struct DecoderStageParams {
  Tensor merge_w, merge_b;
  Tensor up_w, up_b;
  std::vector<ConvBlockParams> conv;
  std::vector<nn::SwinBlockParams> swin;
};

struct DenoiserParams {
  EncoderParams enc;
  Tensor time_w1, time_b1, time_w2, time_b2;
  std::array<std::optional<nn::CrossAttentionParams>, kStages> fusion;
  std::array<std::optional<nn::ProjectorParams>, kStages> projector;
  std::vector<nn::SwinBlockParams> middle;
  std::array<DecoderStageParams, kStages> dec;
  Tensor head_merge_w, head_merge_b, head_norm_g, head_norm_b, head_w, head_b;
};

inline ConvBlockParams init_conv_block(ParamStore& store, const std::string& prefix, std::size_t ch,
                                       std::size_t time_dim, Rng& rng) {
  ConvBlockParams p;
  p.norm_g = nn::ones_param(store, prefix + ".norm.g", {ch});
  p.norm_b = nn::zeros_param(store, prefix + ".norm.b", {ch});
  p.w = nn::conv_param(store, prefix + ".conv.w", ch, ch, 3, rng);
  p.b = nn::zeros_param(store, prefix + ".conv.b", {ch});
  if (time_dim > 0) {
    p.time_w = nn::trunc_normal_param(store, prefix + ".time.w", {time_dim, ch}, nn::kProjectionStd, rng);
    p.time_b = nn::zeros_param(store, prefix + ".time.b", {ch});
  }
  return p;
}

/// x + conv3x3(relu(norm(x) + time bias)).
inline Tensor conv_block(const Tensor& x, const ConvBlockParams& p, const Tensor& t_emb) {
  Tensor h = nn::channel_norm(x, p.norm_g, p.norm_b);
  if (p.time_w.defined() && t_emb.defined()) h = nn::add_channel_bias(h, nn::time_bias(t_emb, p.time_w, p.time_b));
  return add(x, conv2d(relu(h), p.w, p.b, 1, 1));
}

inline DownParams init_down(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  DownParams p;
  p.w3 = nn::conv_param(store, prefix + ".w3", out, in, 3, rng);
  p.b3 = nn::zeros_param(store, prefix + ".b3", {out});
  p.w1 = nn::conv_param(store, prefix + ".w1", out, in, 1, rng);
  p.b1 = nn::zeros_param(store, prefix + ".b1", {out});
  return p;
}

/// Stride-2 3x3 conv plus a stride-2 1x1 residual shortcut.
inline Tensor downsample(const Tensor& x, const DownParams& p) {
  return add(conv2d(x, p.w3, p.b3, 2, 1), conv2d(x, p.w1, p.b1, 2, 0));
}

/// Nearest upsample to (side, side) followed by a 3x3 conv.
inline Tensor upblock(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t side) {
  return conv2d(upsample_nearest(x, side, side), w, b, 1, 1);
}

// ---------------------------------------------------------------------------
// Model.

class DoseModel {
 public:
  /// Builds and initializes every parameter from `seed`.
  static DoseModel build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DoseModel m;
    m.cfg_ = cfg;
    Rng rng(seed);
    m.init(rng);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  bool has_structure_encoder() const { return cfg_.fusion.per_stage_fusion(); }

  /// Structure features f_1..f_5 from y [N, 2+O, H, W].
  ConditionStack encode_structure(const Tensor& y) const {
    check_condition(y);
    ConditionStack stack{y, {}};
    if (!has_structure_encoder()) return stack;
    Tensor h = conv2d(y, structure_.stem_w, structure_.stem_b, 1, 1);
    for (std::size_t i = 0; i < kStages; ++i) {
      h = run_stage_blocks(h, structure_.stages[i], Tensor{});
      h = downsample(h, structure_.stages[i].down);
      stack.features.push_back(h);
    }
    return stack;
  }

  /// Noise estimate for x_t [N, 1, H, W] at per-sample timesteps.
  Tensor denoise(const Tensor& x_t, std::span<const int> t, const ConditionStack& cond) const {
    const std::size_t N = x_t.dim(0), H = cfg_.image_size;
    if (x_t.shape() != Shape{N, 1, H, H}) {
      throw ShapeError("denoise: x_t has shape " + shape_str(x_t.shape()) + ", expected [N,1," + std::to_string(H) +
                       "," + std::to_string(H) + "]");
    }
    if (t.size() != N) throw ShapeError("denoise: need one timestep per sample");
    if (!cond.features.empty() && cond.features.size() != kStages) {
      throw ShapeError("denoise: condition must carry 5 feature maps or none");
    }
    const Tensor temb = time_features(t);

    Tensor h;
    if (cfg_.fusion.per_stage_fusion()) {
      h = x_t;
    } else {
      check_condition(cond.y);
      if (cond.y.dim(0) != N) throw ShapeError("denoise: condition batch differs from x_t");
      h = concat({x_t, cond.y}, 1);
    }
    h = conv2d(h, den_.enc.stem_w, den_.enc.stem_b, 1, 1);
    std::vector<Tensor> skips{h};
    for (std::size_t i = 0; i < kStages; ++i) {
      h = run_stage_blocks(h, den_.enc.stages[i], temb);
      h = downsample(h, den_.enc.stages[i].down);
      if (cfg_.fusion.per_stage_fusion()) {
        if (!cond.features.empty()) {
          const Tensor& f = cond.features[i];
          if (f.shape() != h.shape()) {
            throw ShapeError("denoise: stage " + std::to_string(i + 1) + " feature " + shape_str(f.shape()) +
                             " does not match " + shape_str(h.shape()));
          }
          h = den_.fusion[i] ? nn::cross_attention_fuse(f, h, *den_.fusion[i]) : add(h, f);
        }
        if (den_.projector[i]) h = nn::projector_forward(h, *den_.projector[i]);
      }
      skips.push_back(h);
    }
    for (const auto& blk : den_.middle) h = nn::swin_block(h, blk, temb);
    for (std::size_t i = kStages; i >= 1; --i) {
      const auto& d = den_.dec[i - 1];
      h = conv2d(concat({h, skips[i]}, 1), d.merge_w, d.merge_b, 1, 0);
      h = upblock(h, d.up_w, d.up_b, cfg_.side(i - 1));
      for (const auto& blk : d.conv) h = conv_block(h, blk, temb);
      for (const auto& blk : d.swin) h = nn::swin_block(h, blk, temb);
    }
    h = conv2d(concat({h, skips[0]}, 1), den_.head_merge_w, den_.head_merge_b, 1, 0);
    h = relu(nn::channel_norm(h, den_.head_norm_g, den_.head_norm_b));
    return conv2d(h, den_.head_w, den_.head_b, 1, 1);
  }

  /// encode_structure followed by denoise.
  Tensor forward(const Tensor& x_t, std::span<const int> t, const Tensor& y) const {
    return denoise(x_t, t, encode_structure(y));
  }

  diffusion::NoisePredictor predictor() const {
    return [this](const Tensor& x_t, std::span<const int> t, const Tensor& y) { return forward(x_t, t, y); };
  }

  /// Full reverse process for a condition batch y [N, 2+O, H, W]. Structure
  /// features are computed once and reused at every step.
  Tensor sample(const Tensor& y, const diffusion::NoiseSchedule& s, std::uint64_t seed,
                const diffusion::SampleOptions& opt = {}) const {
    NoGradGuard no_grad;
    const ConditionStack cond = encode_structure(y);
    const std::size_t H = cfg_.image_size;
    auto model = [&](const Tensor& x_t, std::span<const int> t, const Tensor&) { return denoise(x_t, t, cond); };
    return diffusion::sample_loop(model, y, {y.dim(0), 1, H, H}, s, seed, opt);
  }

  /// Coarse group of a parameter name, used for gradient-reach reporting.
  static std::string param_group(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("structure.")) return "structure_encoder";
    if (starts("fusion.") || starts("projector.")) return "fusion_projector";
    if (starts("denoiser.enc.")) return "denoiser_encoder";
    if (starts("denoiser.time.")) return "time_embedding";
    if (starts("denoiser.mid.")) return "middle";
    if (starts("denoiser.dec.") || starts("denoiser.head.")) return "decoder";
    return "other";
  }

 private:
  void check_condition(const Tensor& y) const {
    const std::size_t H = cfg_.image_size;
    if (y.rank() != 4 || y.dim(1) != cfg_.condition_channels() || y.dim(2) != H || y.dim(3) != H) {
      throw ShapeError("condition has shape " + shape_str(y.shape()) + ", expected [N," +
                       std::to_string(cfg_.condition_channels()) + "," + std::to_string(H) + "," + std::to_string(H) +
                       "]");
    }
  }

  Tensor time_features(std::span<const int> t) const {
    const Tensor e = nn::time_embedding(t, cfg_.embedding_dim());
    Tensor h = gelu(nn::time_bias(e, den_.time_w1, den_.time_b1));
    return nn::time_bias(h, den_.time_w2, den_.time_b2);
  }

  Tensor run_stage_blocks(Tensor h, const StageParams& st, const Tensor& temb) const {
    for (const auto& blk : st.conv) h = conv_block(h, blk, temb);
    for (const auto& blk : st.swin) h = nn::swin_block(h, blk, temb);
    return h;
  }

  void init_stage_blocks(StageParams& st, const std::string& prefix, std::size_t stage, std::size_t time_dim,
                         Rng& rng) {
    const std::size_t c = cfg_.channels(stage - 1);
    const std::size_t side = cfg_.side(stage - 1);
    for (std::size_t j = 0; j < cfg_.blocks_per_stage; ++j) {
      const std::string name = prefix + (stage == 1 ? ".conv" : ".swin") + std::to_string(j);
      if (stage == 1) {
        st.conv.push_back(init_conv_block(store_, name, c, time_dim, rng));
      } else {
        st.swin.push_back(nn::init_swin_block(store_, name, c, cfg_.heads, cfg_.window_at(side), j % 2 == 1, time_dim,
                                              rng, cfg_.mlp_ratio));
      }
    }
  }

  void init_encoder(EncoderParams& enc, const std::string& prefix, std::size_t in_ch, std::size_t time_dim, Rng& rng) {
    enc.stem_w = nn::conv_param(store_, prefix + ".stem.w", cfg_.channels(0), in_ch, 3, rng);
    enc.stem_b = nn::zeros_param(store_, prefix + ".stem.b", {cfg_.channels(0)});
    for (std::size_t i = 1; i <= kStages; ++i) {
      const std::string sp = prefix + ".s" + std::to_string(i);
      init_stage_blocks(enc.stages[i - 1], sp, i, time_dim, rng);
      enc.stages[i - 1].down = init_down(store_, sp + ".down", cfg_.channels(i - 1), cfg_.channels(i), rng);
    }
  }

  void init(Rng& rng) {
    const std::size_t D = cfg_.embedding_dim();
    const bool fused = cfg_.fusion.per_stage_fusion();
    if (fused) init_encoder(structure_, "structure", cfg_.condition_channels(), 0, rng);

    den_.time_w1 = nn::trunc_normal_param(store_, "denoiser.time.w1", {D, D}, nn::kProjectionStd, rng);
    den_.time_b1 = nn::zeros_param(store_, "denoiser.time.b1", {D});
    den_.time_w2 = nn::trunc_normal_param(store_, "denoiser.time.w2", {D, D}, nn::kProjectionStd, rng);
    den_.time_b2 = nn::zeros_param(store_, "denoiser.time.b2", {D});

    init_encoder(den_.enc, "denoiser.enc", fused ? 1 : 1 + cfg_.condition_channels(), D, rng);
    for (std::size_t i = 1; i <= kStages && fused; ++i) {
      const std::size_t c = cfg_.channels(i);
      if (cfg_.fusion.uses_attention(i)) {
        den_.fusion[i - 1] = nn::init_cross_attention(store_, "fusion.s" + std::to_string(i), c, c, c, rng);
      }
      if (cfg_.use_projector) {
        den_.projector[i - 1] = nn::init_projector(store_, "projector.s" + std::to_string(i), c, cfg_.projector_ratio, rng);
      }
    }
    const std::size_t c5 = cfg_.channels(kStages);
    const std::size_t w5 = cfg_.window_at(cfg_.side(kStages));
    for (std::size_t j = 0; j < cfg_.middle_blocks; ++j) {
      den_.middle.push_back(nn::init_swin_block(store_, "denoiser.mid.swin" + std::to_string(j), c5, cfg_.heads, w5,
                                                j % 2 == 1, D, rng, cfg_.mlp_ratio));
    }
    for (std::size_t i = kStages; i >= 1; --i) {
      auto& d = den_.dec[i - 1];
      const std::string sp = "denoiser.dec.s" + std::to_string(i);
      const std::size_t c = cfg_.channels(i), c_out = cfg_.channels(i - 1);
      d.merge_w = nn::conv_param(store_, sp + ".merge.w", c, 2 * c, 1, rng);
      d.merge_b = nn::zeros_param(store_, sp + ".merge.b", {c});
      d.up_w = nn::conv_param(store_, sp + ".up.w", c_out, c, 3, rng);
      d.up_b = nn::zeros_param(store_, sp + ".up.b", {c_out});
      StageParams blocks;
      init_stage_blocks(blocks, sp, i, D, rng);
      d.conv = std::move(blocks.conv);
      d.swin = std::move(blocks.swin);
    }
    const std::size_t c0 = cfg_.channels(0);
    den_.head_merge_w = nn::conv_param(store_, "denoiser.head.merge.w", c0, 2 * c0, 1, rng);
    den_.head_merge_b = nn::zeros_param(store_, "denoiser.head.merge.b", {c0});
    den_.head_norm_g = nn::ones_param(store_, "denoiser.head.norm.g", {c0});
    den_.head_norm_b = nn::zeros_param(store_, "denoiser.head.norm.b", {c0});
    den_.head_w = nn::zeros_param(store_, "denoiser.head.out.w", {1, c0, 3, 3});
    den_.head_b = nn::zeros_param(store_, "denoiser.head.out.b", {1});
  }

  ModelConfig cfg_;
  ParamStore store_;
  EncoderParams structure_;
  DenoiserParams den_;
};

}  // namespace dosediff::model
