#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dosediff/attention.hpp"
#include "dosediff/gradcheck.hpp"

using namespace dosediff;
using namespace dosediff::nn;

namespace {

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
  auto v = rng.normal_vector(shape_numel(shape));
  for (double& x : v) x *= stddev;
  return Tensor(shape, v);
}

void fill(Tensor t, double value) {
  for (double& x : t.mutable_data()) x = value;
}

// Replaces every parameter with N(0, stddev^2) so no branch is degenerate.
void randomize(ParamStore& store, Rng& rng, double stddev) {
  for (auto& [_, p] : store)
    for (double& x : p.mutable_data()) x = rng.normal() * stddev;
}

std::vector<Probe> all_probes(ParamStore& store) {
  std::vector<Probe> probes;
  for (auto& [_, p] : store) probes.push_back({p, {}});
  return probes;
}

}  // namespace

TEST(Windows, PartitionCountsAndSingleWindow) {
  Rng rng(1);
  const Tensor x = randn({3, 8, 8}, rng);
  EXPECT_EQ(window_partition(x, 4).shape(), (Shape{4, 3, 4, 4}));
  const Tensor one = window_partition(x, 8);
  EXPECT_EQ(one.shape(), (Shape{1, 3, 8, 8}));
  EXPECT_EQ(one.values(), x.values());
}

TEST(Windows, PartitionLayoutIsRowMajorOverGrid) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const Tensor w = window_partition(Tensor({1, 4, 4}, v), 2);
  // Window 1 is the top-right 2x2 block.
  EXPECT_EQ(std::vector<double>(w.values().begin() + 4, w.values().begin() + 8), (std::vector<double>{2, 3, 6, 7}));
}

TEST(Windows, MergeInvertsPartitionExactly) {
  Rng rng(2);
  for (std::size_t w : {1, 2, 4}) {
    for (std::size_t side : {4, 8, 12}) {
      if (side % w) continue;
      const Tensor x = randn({2, 3, side, side}, rng);
      EXPECT_EQ(window_merge(window_partition(x, w), 2, side, side).values(), x.values());
      const Tensor single = randn({3, side, side}, rng);
      const Tensor back = window_merge(window_partition(single, w), 0, side, side);
      EXPECT_EQ(back.shape(), single.shape());
      EXPECT_EQ(back.values(), single.values());
    }
  }
}

TEST(Windows, NonDivisibleRejected) {
  EXPECT_THROW(window_partition(Tensor::zeros({1, 6, 6}), 4), ShapeError);
}

TEST(Shift, ZeroShiftIsIdentity) {
  Rng rng(3);
  const Tensor x = randn({1, 2, 4, 4}, rng);
  EXPECT_EQ(cyclic_shift(x, 0, 0).values(), x.values());
}

TEST(Shift, FullPeriodIsIdentity) {
  Rng rng(4);
  const Tensor x = randn({1, 2, 4, 4}, rng);
  EXPECT_EQ(cyclic_shift(cyclic_shift(x, 2, 2), 2, 2).values(), x.values());
}

TEST(Shift, InverseRollIsExact) {
  Rng rng(5);
  for (std::int64_t d : {-7, -1, 1, 3, 9}) {
    const Tensor x = randn({2, 3, 6, 5}, rng);
    EXPECT_EQ(cyclic_shift(cyclic_shift(x, d, -d), -d, d).values(), x.values());
  }
}

TEST(Shift, MovesContentToroidally) {
  const Tensor x({1, 1, 2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(cyclic_shift(x, 0, 1).values(), (std::vector<double>{2, 0, 1, 5, 3, 4}));
}

TEST(WindowAttention, EqualQueriesAndKeysGiveUniformRows) {
  ParamStore store;
  Rng rng(6);
  auto p = init_attention(store, "a", 4, 2, rng);
  fill(p.w_q, 0.0);
  fill(p.w_k, 0.0);
  Tensor maps;
  window_attention(randn({3, 4, 2, 2}, rng), p, &maps);
  for (double v : maps.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(WindowAttention, SinglePixelWindow) {
  ParamStore store;
  Rng rng(7);
  auto p = init_attention(store, "a", 4, 2, rng);
  randomize(store, rng, 0.5);
  const Tensor x = randn({2, 4, 1, 1}, rng);
  Tensor maps;
  const Tensor out = window_attention(x, p, &maps);
  for (double v : maps.values()) EXPECT_EQ(v, 1.0);
  // out = (x W_v) W_o + b_o
  NoGradGuard g;
  const Tensor expected = add(matmul(matmul(reshape(x, {2, 4}), p.w_v), p.w_o), reshape(p.b_o, {1, 4}));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[i], expected[i], 1e-14);
}

TEST(WindowAttention, RowsSumToOne) {
  ParamStore store;
  Rng rng(8);
  auto p = init_attention(store, "a", 8, 4, rng);
  randomize(store, rng, 1.0);
  Tensor maps;
  window_attention(randn({4, 8, 4, 4}, rng, 3.0), p, &maps);
  const std::size_t n = 16;
  for (std::size_t r = 0; r < maps.numel() / n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += maps[r * n + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(WindowAttention, HeadsMustDivideChannels) {
  ParamStore store;
  Rng rng(9);
  EXPECT_THROW(init_attention(store, "a", 6, 4, rng), ShapeError);
}

TEST(SwinBlock, ZeroResidualBranchesGiveIdentity) {
  for (bool shift : {false, true}) {
    ParamStore store;
    Rng rng(10);
    auto p = init_swin_block(store, "b", 8, 2, 4, shift, 6, rng);
    randomize(store, rng, 0.5);
    fill(p.attn.w_o, 0.0);
    fill(p.attn.b_o, 0.0);
    fill(p.w2, 0.0);
    fill(p.b2, 0.0);
    const Tensor x = randn({2, 8, 8, 8}, rng);
    const Tensor out = swin_block(x, p, randn({2, 6}, rng));
    EXPECT_EQ(out.values(), x.values());
  }
}

TEST(SwinBlock, ShapePreservedShiftedAndUnshifted) {
  ParamStore store;
  Rng rng(11);
  auto plain = init_swin_block(store, "p", 4, 4, 4, false, 0, rng);
  auto shifted = init_swin_block(store, "s", 4, 4, 4, true, 0, rng);
  const Tensor x = randn({1, 4, 8, 8}, rng);
  const Tensor y = swin_block(swin_block(x, plain), shifted);
  EXPECT_EQ(y.shape(), x.shape());
}

TEST(SwinBlock, ShiftLetsInformationCrossWindows) {
  ParamStore store;
  Rng rng(12);
  auto plain = init_swin_block(store, "p", 4, 1, 2, false, 0, rng);
  auto shifted = init_swin_block(store, "s", 4, 1, 2, true, 0, rng);
  randomize(store, rng, 0.7);
  Tensor x = randn({1, 4, 4, 4}, rng);
  auto pixel_sensitivity = [&](const SwinBlockParams& p) {
    // Perturb pixel (0,0) and see whether pixel (2,2) changes.
    std::vector<double> v = x.values();
    const Tensor a = swin_block(Tensor(x.shape(), v), p);
    v[0] += 1.0;
    const Tensor b = swin_block(Tensor(x.shape(), v), p);
    return std::abs(a[2 * 4 + 2] - b[2 * 4 + 2]);
  };
  EXPECT_EQ(pixel_sensitivity(plain), 0.0);
  // With w=2 the shifted windows straddle (1..2) but not (0,0)-(2,2); two
  // blocks in sequence connect them.
  std::vector<double> v = x.values();
  const Tensor a = swin_block(swin_block(Tensor(x.shape(), v), plain), shifted);
  v[1 * 4 + 1] += 1.0;
  const Tensor b = swin_block(swin_block(Tensor(x.shape(), v), plain), shifted);
  EXPECT_GT(std::abs(a[2 * 4 + 2] - b[2 * 4 + 2]), 0.0);
}

TEST(SwinBlock, TimeEmbeddingDimMismatch) {
  ParamStore store;
  Rng rng(13);
  auto p = init_swin_block(store, "b", 4, 2, 2, false, 6, rng);
  EXPECT_THROW(swin_block(randn({1, 4, 4, 4}, rng), p, randn({1, 5}, rng)), ShapeError);
}

TEST(SwinBlock, GradientMatchesFiniteDifferences) {
  ParamStore store;
  Rng rng(14);
  auto p = init_swin_block(store, "b", 4, 2, 2, true, 4, rng);
  randomize(store, rng, 0.5);
  Tensor x(Shape{1, 4, 4, 4}, rng.normal_vector(64), true);
  Tensor temb(Shape{1, 4}, rng.normal_vector(4), true);
  const Tensor proj = randn({1, 4, 4, 4}, rng);
  auto loss = [&] { return sum(mul(swin_block(x, p, temb), proj)); };
  auto probes = all_probes(store);
  probes.push_back({x, {}});
  probes.push_back({temb, {}});
  EXPECT_LT(finite_diff_check(loss, probes), 1e-4);
}

TEST(CrossAttention, SingleKeyTokenGivesValueRow) {
  ParamStore store;
  Rng rng(15);
  auto p = init_cross_attention(store, "c", 3, 4, 4, rng);
  randomize(store, rng, 1.0);
  const Tensor a = randn({1, 5, 3}, rng);
  const Tensor b = randn({1, 1, 4}, rng);
  const auto r = cross_attention(a, b, p);
  for (double w : r.weights.values()) EXPECT_EQ(w, 1.0);
  NoGradGuard g;
  const Tensor v = matmul(b, p.w_v);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(r.output[i * 4 + c], v[c], 1e-14);
}

TEST(CrossAttention, RowsSumToOne) {
  ParamStore store;
  Rng rng(16);
  auto p = init_cross_attention(store, "c", 4, 6, 5, rng);
  randomize(store, rng, 1.0);
  const auto r = cross_attention(randn({2, 9, 4}, rng, 2.0), randn({2, 9, 6}, rng, 2.0), p);
  for (std::size_t row = 0; row < 18; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) s += r.weights[row * 9 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(CrossAttention, PositiveKeyScalingPreservesRowArgmax) {
  ParamStore store;
  Rng rng(17);
  auto p = init_cross_attention(store, "c", 4, 4, 4, rng);
  randomize(store, rng, 1.0);
  const Tensor a = randn({1, 16, 4}, rng), b = randn({1, 16, 4}, rng);
  auto argmax_rows = [](const Tensor& w) {
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < 16; ++r) {
      auto begin = w.values().begin() + static_cast<std::ptrdiff_t>(r * 16);
      out.push_back(static_cast<std::size_t>(std::max_element(begin, begin + 16) - begin));
    }
    return out;
  };
  const auto base = argmax_rows(cross_attention(a, b, p).weights);
  const std::vector<double> saved = p.w_k.values();
  for (double c : {0.1, 0.5, 3.0, 10.0}) {
    auto wk = p.w_k.mutable_data();
    for (std::size_t i = 0; i < wk.size(); ++i) wk[i] = saved[i] * c;
    EXPECT_EQ(argmax_rows(cross_attention(a, b, p).weights), base) << "c=" << c;
  }
}

TEST(CrossAttention, PermutationProperties) {
  ParamStore store;
  Rng rng(18);
  auto p = init_cross_attention(store, "c", 3, 4, 4, rng);
  randomize(store, rng, 1.0);
  const std::size_t n = 6;
  const Tensor a = randn({1, n, 3}, rng), b = randn({1, n, 4}, rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  auto permute_rows = [&](const Tensor& t) {
    const std::size_t c = t.dim(2);
    std::vector<double> v(t.numel());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) v[i * c + k] = t[perm[i] * c + k];
    return Tensor(t.shape(), v);
  };
  const Tensor base = cross_attention(a, b, p).output;
  // Permuting the key/value tokens alone leaves every output row unchanged.
  const Tensor kv_perm = cross_attention(a, permute_rows(b), p).output;
  for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(kv_perm[i], base[i], 1e-12);
  // Permuting both maps by the same token permutation permutes output rows.
  const Tensor both = cross_attention(permute_rows(a), permute_rows(b), p).output;
  const Tensor expected = permute_rows(base);
  for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(both[i], expected[i], 1e-12);
}

TEST(CrossAttention, FuseRejectsSpatialMismatch) {
  ParamStore store;
  Rng rng(19);
  auto p = init_cross_attention(store, "c", 4, 4, 4, rng);
  EXPECT_THROW(cross_attention_fuse(Tensor::zeros({1, 4, 4, 4}), Tensor::zeros({1, 4, 2, 2}), p), ShapeError);
}

TEST(CrossAttention, FuseGradientMatchesFiniteDifferences) {
  ParamStore store;
  Rng rng(20);
  auto p = init_cross_attention(store, "c", 3, 4, 4, rng);
  randomize(store, rng, 0.7);
  Tensor a(Shape{1, 3, 2, 3}, rng.normal_vector(18), true);
  Tensor b(Shape{1, 4, 2, 3}, rng.normal_vector(24), true);
  const Tensor proj = randn({1, 4, 2, 3}, rng);
  auto loss = [&] { return sum(mul(cross_attention_fuse(a, b, p), proj)); };
  auto probes = all_probes(store);
  probes.push_back({a, {}});
  probes.push_back({b, {}});
  EXPECT_LT(finite_diff_check(loss, probes), 1e-4);
}

TEST(Projector, ZeroWeightsGiveIdentity) {
  ParamStore store;
  Rng rng(21);
  auto p = init_projector(store, "p", 8, 4, rng);
  for (auto& [_, t] : store) fill(t, 0.0);
  const Tensor x = randn({2, 8, 3, 3}, rng);
  const Tensor y = projector_forward(x, p);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.values(), x.values());
}

TEST(Projector, IdentityAtInitialization) {
  ParamStore store;
  Rng rng(22);
  auto p = init_projector(store, "p", 8, 2, rng);
  const Tensor x = randn({1, 8, 2, 2}, rng);
  EXPECT_EQ(projector_forward(x, p).values(), x.values());
}

TEST(Projector, HiddenDimFromRatio) {
  ParamStore store;
  Rng rng(23);
  auto p = init_projector(store, "p", 32, 4, rng);
  EXPECT_EQ(p.down_w.dim(0), 8u);
  EXPECT_EQ(p.up_w.dim(0), 32u);
  EXPECT_THROW(init_projector(store, "q", 30, 4, rng), ShapeError);
}

TEST(Projector, ComputesBottleneckMlp) {
  ParamStore store;
  Rng rng(24);
  auto p = init_projector(store, "p", 2, 2, rng);
  // down: h = 1*x0 + 2*x1 + 0.5; up: out_c = c_w * gelu(h) + c_b
  auto d = p.down_w.mutable_data();
  d[0] = 1.0;
  d[1] = 2.0;
  p.down_b.mutable_data()[0] = 0.5;
  p.up_w.mutable_data()[0] = 3.0;
  p.up_w.mutable_data()[1] = -1.0;
  p.up_b.mutable_data()[1] = 0.25;
  const Tensor y = projector_forward(Tensor({1, 2, 1, 1}, {0.3, -0.4}), p);
  const double h = 0.3 - 0.8 + 0.5;
  const double g = 0.5 * h * (1.0 + std::erf(h / std::sqrt(2.0)));
  EXPECT_NEAR(y[0], 0.3 + 3.0 * g, 1e-15);
  EXPECT_NEAR(y[1], -0.4 - g + 0.25, 1e-15);
}

TEST(TimeEmbedding, ZeroTimestep) {
  const auto e = time_embedding(0.0, 8);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(e[k], 0.0);
    EXPECT_EQ(e[4 + k], 1.0);
  }
}

TEST(TimeEmbedding, BoundedAndDistinct) {
  const std::size_t dim = 4;
  std::vector<std::vector<double>> seen;
  for (int t = 0; t <= 1000; ++t) {
    const auto e = time_embedding(static_cast<double>(t), dim);
    for (double v : e) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
    seen.push_back(e);
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    for (std::size_t j = i + 1; j < seen.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d = std::max(d, std::abs(seen[i][k] - seen[j][k]));
      ASSERT_GT(d, 1e-6) << i << " vs " << j;
    }
}

TEST(TimeEmbedding, OddDimRejected) { EXPECT_THROW(time_embedding(3.0, 5), std::invalid_argument); }
