#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "dosediff/gradcheck.hpp"
#include "dosediff/networks.hpp"

using namespace dosediff;
using namespace dosediff::model;

namespace {

ModelConfig tiny(std::size_t H = 16, std::size_t C = 4) {
  ModelConfig cfg;
  cfg.image_size = H;
  cfg.base_channels = C;
  cfg.heads = C >= 4 ? 4 : 1;
  cfg.window = 4;
  cfg.projector_ratio = C >= 4 ? 4 : 1;
  return cfg;
}

Tensor randn(Shape shape, Rng& rng) { return Tensor(shape, rng.normal_vector(shape_numel(shape))); }

std::vector<int> steps(std::size_t n, int base = 7) {
  std::vector<int> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = base + 13 * static_cast<int>(i);
  return t;
}

// Independent parameter count for a config.
std::size_t expected_param_count(const ModelConfig& cfg) {
  const std::size_t D = cfg.embedding_dim(), r = cfg.mlp_ratio;
  auto conv_block = [&](std::size_t c, std::size_t d) { return 2 * c + 9 * c * c + c + (d ? d * c + c : 0); };
  auto swin = [&](std::size_t c, std::size_t d) {
    return 4 * c + (4 * c * c + c) + (r * c * c + r * c + r * c * c + c) + (d ? d * c + c : 0);
  };
  auto down = [](std::size_t in, std::size_t out) { return 9 * in * out + out + in * out + out; };
  auto blocks = [&](std::size_t stage, std::size_t d) {
    const std::size_t c = cfg.channels(stage - 1);
    return cfg.blocks_per_stage * (stage == 1 ? conv_block(c, d) : swin(c, d));
  };
  auto encoder = [&](std::size_t in, std::size_t d) {
    std::size_t n = 9 * in * cfg.channels(0) + cfg.channels(0);
    for (std::size_t i = 1; i <= kStages; ++i) n += blocks(i, d) + down(cfg.channels(i - 1), cfg.channels(i));
    return n;
  };
  const bool fused = cfg.fusion.per_stage_fusion();
  std::size_t n = 0;
  if (fused) n += encoder(2 + cfg.oar_count, 0);
  n += 2 * (D * D + D);
  n += encoder(fused ? 1 : 3 + cfg.oar_count, D);
  for (std::size_t i = 1; i <= kStages && fused; ++i) {
    const std::size_t c = cfg.channels(i);
    if (cfg.fusion.uses_attention(i)) n += 3 * c * c;
    if (cfg.use_projector) {
      const std::size_t h = c / cfg.projector_ratio;
      n += c * h + h + h * c + c;
    }
  }
  n += cfg.middle_blocks * swin(cfg.channels(kStages), D);
  for (std::size_t i = 1; i <= kStages; ++i) {
    const std::size_t c = cfg.channels(i), co = cfg.channels(i - 1);
    n += 2 * c * c + c + 9 * c * co + co + blocks(i, D);
  }
  const std::size_t c0 = cfg.channels(0);
  n += 2 * c0 * c0 + c0 + 2 * c0 + 9 * c0 + 1;
  return n;
}

std::vector<FusionStrategy> all_strategies() {
  std::vector<FusionStrategy> s{FusionStrategy::concatenate(), FusionStrategy::add_all(), FusionStrategy::attn_all()};
  for (int k = 0; k <= 5; ++k) s.push_back(FusionStrategy::attn_last(k));
  return s;
}

// Adds N(0, s^2) to every parameter so zero-initialized branches carry signal.
void jitter(ParamStore& store, Rng& rng, double s) {
  for (auto& [_, p] : store)
    for (double& x : p.mutable_data()) x += rng.normal() * s;
}

}  // namespace

TEST(Config, StageSides) {
  ModelConfig cfg;
  cfg.image_size = 256;
  EXPECT_EQ((std::vector<std::size_t>{cfg.side(1), cfg.side(2), cfg.side(3), cfg.side(4), cfg.side(5)}),
            (std::vector<std::size_t>{128, 64, 32, 16, 8}));
  cfg.image_size = 16;
  EXPECT_EQ(cfg.side(4), 1u);
  EXPECT_EQ(cfg.side(5), 1u);
}

TEST(Config, Validation) {
  ModelConfig cfg = tiny();
  cfg.image_size = 24;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny();
  cfg.window = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny();
  cfg.fusion = FusionStrategy::attn_last(6);
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(tiny().validate());
}

TEST(Fusion, NamesRoundTrip) {
  for (const auto& s : all_strategies()) EXPECT_EQ(FusionStrategy::parse(s.name()), s);
  EXPECT_THROW(FusionStrategy::parse("attn-last"), ConfigError);
  EXPECT_THROW(FusionStrategy::parse("attn-last9"), ConfigError);
  EXPECT_THROW(FusionStrategy::parse("mul-all"), ConfigError);
}

TEST(Fusion, AttnLast2UsesAttentionInStagesFourAndFive) {
  const auto f = FusionStrategy::attn_last(2);
  EXPECT_EQ((std::vector<bool>{f.uses_attention(1), f.uses_attention(2), f.uses_attention(3), f.uses_attention(4),
                               f.uses_attention(5)}),
            (std::vector<bool>{false, false, false, true, true}));
  auto m = DoseModel::build(tiny(), 1);
  for (int i = 1; i <= 5; ++i) EXPECT_EQ(m.params().contains("fusion.s" + std::to_string(i) + ".w_q"), i >= 4);
}

TEST(Build, SmokeH32C8) {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.base_channels = 8;
  auto m = DoseModel::build(cfg, 3);
  Rng rng(1);
  const Tensor x = randn({1, 1, 32, 32}, rng), y = randn({1, 5, 32, 32}, rng);
  const auto t = steps(1);
  const Tensor out = m.forward(x, t, y);
  EXPECT_EQ(out.shape(), x.shape());
  for (double v : out.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Build, SameSeedSameParameters) {
  auto a = DoseModel::build(tiny(), 42), b = DoseModel::build(tiny(), 42), c = DoseModel::build(tiny(), 43);
  ASSERT_EQ(a.params().names(), b.params().names());
  bool any_diff = false;
  for (const auto& name : a.params().names()) {
    EXPECT_EQ(a.params().at(name).values(), b.params().at(name).values()) << name;
    any_diff |= a.params().at(name).values() != c.params().at(name).values();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Build, ParameterCountTable) {
  struct Row {
    std::size_t H, C, O;
    FusionStrategy f;
    bool projector;
  };
  const std::vector<Row> rows{
      {16, 4, 3, FusionStrategy::attn_last(2), true}, {16, 4, 3, FusionStrategy::concatenate(), true},
      {16, 4, 1, FusionStrategy::add_all(), false},   {32, 8, 3, FusionStrategy::attn_all(), true},
      {32, 8, 2, FusionStrategy::attn_last(1), true}, {64, 4, 3, FusionStrategy::attn_last(4), false},
  };
  for (const auto& r : rows) {
    ModelConfig cfg = tiny(r.H, r.C);
    cfg.oar_count = r.O;
    cfg.fusion = r.f;
    cfg.use_projector = r.projector;
    auto m = DoseModel::build(cfg, 0);
    EXPECT_EQ(m.params().parameter_count(), expected_param_count(cfg)) << r.f.name() << " H=" << r.H;
    EXPECT_EQ(DoseModel::build(cfg, 99).params().parameter_count(), m.params().parameter_count());
  }
}

TEST(Build, ParameterNamesCoverEveryGroup) {
  auto m = DoseModel::build(tiny(), 0);
  std::map<std::string, int> groups;
  for (const auto& name : m.params().names()) ++groups[DoseModel::param_group(name)];
  for (const char* g :
       {"structure_encoder", "fusion_projector", "denoiser_encoder", "time_embedding", "middle", "decoder"})
    EXPECT_GT(groups[g], 0) << g;
  EXPECT_EQ(groups.count("other"), 0u);
}

TEST(Build, ConcatenateHasNoStructureEncoder) {
  ModelConfig cfg = tiny();
  cfg.fusion = FusionStrategy::concatenate();
  auto m = DoseModel::build(cfg, 0);
  EXPECT_FALSE(m.has_structure_encoder());
  for (const auto& name : m.params().names()) {
    EXPECT_NE(DoseModel::param_group(name), "structure_encoder") << name;
    EXPECT_NE(DoseModel::param_group(name), "fusion_projector") << name;
  }
  EXPECT_EQ(m.params().at("denoiser.enc.stem.w").dim(1), 1u + 5u);
}

TEST(Encode, InputChannelsFromOarCount) {
  auto m = DoseModel::build(tiny(), 0);
  EXPECT_EQ(m.params().at("structure.stem.w").dim(1), 5u);
  Rng rng(2);
  EXPECT_THROW(m.encode_structure(randn({1, 4, 16, 16}, rng)), ShapeError);
}

TEST(Encode, FeatureSidesAndChannels) {
  ModelConfig cfg = tiny(64, 4);
  auto m = DoseModel::build(cfg, 0);
  Rng rng(3);
  const auto stack = m.encode_structure(randn({2, 5, 64, 64}, rng));
  ASSERT_EQ(stack.features.size(), 5u);
  const std::size_t sides[] = {32, 16, 8, 4, 2};
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_EQ(stack.features[i].shape(), (Shape{2, 4 * cfg.multipliers[i], sides[i], sides[i]}));
}

TEST(Denoise, OutputShapeForEveryStrategy) {
  Rng rng(4);
  const Tensor x = randn({2, 1, 16, 16}, rng), y = randn({2, 5, 16, 16}, rng);
  const auto t = steps(2);
  for (const auto& s : all_strategies()) {
    ModelConfig cfg = tiny();
    cfg.fusion = s;
    auto m = DoseModel::build(cfg, 5);
    jitter(m.params(), rng, 0.05);
    const Tensor out = m.forward(x, t, y);
    EXPECT_EQ(out.shape(), x.shape()) << s.name();
  }
}

TEST(Denoise, HeadIsZeroAtInitialization) {
  auto m = DoseModel::build(tiny(), 5);
  Rng rng(5);
  const Tensor out = m.forward(randn({1, 1, 16, 16}, rng), steps(1), randn({1, 5, 16, 16}, rng));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Denoise, ZeroFeaturesEqualPureDenoiserPath) {
  ModelConfig cfg = tiny();
  cfg.fusion = FusionStrategy::add_all();
  auto m = DoseModel::build(cfg, 6);
  Rng rng(6);
  jitter(m.params(), rng, 0.05);
  const Tensor x = randn({1, 1, 16, 16}, rng), y = randn({1, 5, 16, 16}, rng);
  ConditionStack zeros = m.encode_structure(y);
  for (auto& f : zeros.features) f = Tensor::zeros(f.shape());
  const ConditionStack pure{y, {}};
  const auto t = steps(1);
  EXPECT_EQ(m.denoise(x, t, zeros).values(), m.denoise(x, t, pure).values());
}

TEST(Denoise, AttnLast0MatchesAddAllBitwise) {
  ModelConfig a = tiny(), b = tiny();
  a.fusion = FusionStrategy::attn_last(0);
  b.fusion = FusionStrategy::add_all();
  auto ma = DoseModel::build(a, 7), mb = DoseModel::build(b, 7);
  ASSERT_EQ(ma.params().names(), mb.params().names());
  Rng rng(7);
  jitter(ma.params(), rng, 0.05);
  for (const auto& name : ma.params().names()) {
    auto dst = mb.params().at(name).mutable_data();
    const auto src = ma.params().at(name).data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  const Tensor x = randn({2, 1, 16, 16}, rng), y = randn({2, 5, 16, 16}, rng);
  const auto t = steps(2);
  EXPECT_EQ(ma.forward(x, t, y).values(), mb.forward(x, t, y).values());
}

TEST(Denoise, ShapeErrors) {
  auto m = DoseModel::build(tiny(), 0);
  Rng rng(8);
  const Tensor y = randn({1, 5, 16, 16}, rng);
  const std::vector<int> t{5};
  EXPECT_THROW(m.forward(randn({1, 1, 8, 8}, rng), t, y), ShapeError);
  EXPECT_THROW(m.forward(randn({1, 1, 16, 16}, rng), std::vector<int>{1, 2}, y), ShapeError);
}

TEST(Gradients, EveryGroupReachedAfterOneTrainingStep) {
  ModelConfig cfg = tiny();
  auto m = DoseModel::build(cfg, 9);
  auto& store = m.params();
  const auto s = diffusion::make_schedule(50, 0.002, 0.4);
  Rng rng(9);
  const Tensor x0 = randn({2, 1, 16, 16}, rng), y = randn({2, 5, 16, 16}, rng);

  auto step_grads = [&] { return backward(diffusion::training_step(m.predictor(), x0, y, s, rng), store); };
  adam_step(store, step_grads(), AdamOptions{.lr = 1e-2});
  const GradMap grads = step_grads();

  std::map<std::string, double> norms;
  for (const auto& [name, g] : grads) {
    double n = 0.0;
    for (double v : g.values()) n += v * v;
    norms[DoseModel::param_group(name)] += n;
  }
  for (const char* g :
       {"structure_encoder", "fusion_projector", "denoiser_encoder", "time_embedding", "middle", "decoder"})
    EXPECT_GT(norms[g], 0.0) << g;
}

TEST(Gradients, EndToEndFiniteDifferences) {
  ModelConfig cfg = tiny(16, 4);
  auto m = DoseModel::build(cfg, 11);
  Rng rng(11);
  jitter(m.params(), rng, 0.1);
  const Tensor x = randn({1, 1, 16, 16}, rng), y = randn({1, 5, 16, 16}, rng), target = randn({1, 1, 16, 16}, rng);
  const std::vector<int> t{17};
  auto loss = [&] { return mse_loss(m.forward(x, t, y), target); };

  // Three random coordinates from every parameter tensor.
  std::vector<Probe> probes;
  for (auto& [name, p] : m.params()) {
    Probe probe{p, {}};
    for (int k = 0; k < 3; ++k)
      probe.indices.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.numel()) - 1)));
    probes.push_back(std::move(probe));
  }
  EXPECT_LT(finite_diff_check(loss, probes), 1e-3);
}
