#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "vitmix/attribution.hpp"

using namespace vitmix;
using vitmix::testing::random_image;
using vitmix::testing::random_tensor;
using vitmix::testing::sharpened_model;

namespace {

// Random row-stochastic [L x H x T x T] stack.
Tensor random_attention(std::size_t L, std::size_t H, std::size_t T, SeededRng& rng) {
  Tensor a({L, H, T, T});
  for (std::size_t r = 0; r < L * H * T; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < T; ++j) total += (a[r * T + j] = rng.uniform() + 1e-3);
    for (std::size_t j = 0; j < T; ++j) a[r * T + j] /= total;
  }
  return a;
}

void expect_unit_range(const AttributionMap& m) {
  for (double v : m.grid.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

}  // namespace

// ---------------------------------------------------------------- rollout

TEST(Rollout, IdentityAttentionGivesDegenerateMap) {
  Tensor a({2, 2, 5, 5});
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t i = 0; i < 5; ++i) a[s * 25 + i * 5 + i] = 1.0;
  EXPECT_EQ(rollout_matrix(a, 0), Tensor::identity(5));
  const AttributionMap m = attention_rollout(a, 0);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.grid, Tensor({2, 2}));
}

TEST(Rollout, HalfIdentityMixingByHand) {
  const Tensor a({1, 1, 2, 2}, {0.5, 0.5, 0.5, 0.5});
  const Tensor expected = Tensor::matrix({{0.75, 0.25}, {0.25, 0.75}});
  EXPECT_EQ(rollout_factor(a, 0), expected);
  const Tensor r = rollout_matrix(a, 0);
  EXPECT_EQ(r.at(0, 0), 0.75);
  EXPECT_EQ(r.at(0, 1), 0.25);
}

TEST(Rollout, ProductRowsAreStochastic) {
  SeededRng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_attention(4, 3, 10, rng);
    const Tensor r = rollout_matrix(a, trial % 4);
    for (std::size_t i = 0; i < 10; ++i) {
      double total = 0.0;
      for (double v : r.row(i)) total += v;
      ASSERT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Rollout, LastLayerIsSingleFactor) {
  SeededRng rng(3);
  const Tensor a = random_attention(3, 4, 10, rng);
  // Direct computation: head mean, half identity, row renormalization.
  Tensor expected({10, 10});
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t i = 0; i < 100; ++i) expected[i] += a[(2 * 4 + h) * 100 + i] / 4.0;
  for (std::size_t i = 0; i < 10; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 10; ++j) total += (expected.at(i, j) = 0.5 * expected.at(i, j) + (i == j ? 0.5 : 0));
    for (std::size_t j = 0; j < 10; ++j) expected.at(i, j) /= total;
  }
  const Tensor r = rollout_matrix(a, 2);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_NEAR(r[i], expected[i], 1e-15);
  Tensor raw({3, 3});
  for (std::size_t p = 0; p < 9; ++p) raw[p] = expected.at(0, p + 1);
  EXPECT_EQ(attention_rollout(a, 2).grid, minmax_normalize(raw));
}

TEST(Rollout, BadArguments) {
  SeededRng rng(1);
  EXPECT_THROW(attention_rollout(random_attention(2, 1, 5, rng), 2), ArgumentError);
  EXPECT_THROW(attention_rollout(Tensor({2, 5, 5}), 0), DimensionError);
  EXPECT_THROW(attention_rollout(random_attention(1, 1, 6, rng), 0), DimensionError);  // 5 patches
}

// ---------------------------------------------------------------- saliency

TEST(Saliency, ZeroGradientIsDegenerate) {
  const AttributionMap m = saliency_map(Tensor({8, 8, 3}), 4);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.grid, Tensor({4, 4}));
}

TEST(Saliency, TopLeftBlockOnly) {
  Tensor g({8, 8, 3});
  g.at(0, 1, 2) = -0.5;
  g.at(1, 0, 0) = 0.25;
  const AttributionMap m = saliency_map(g, 4);
  EXPECT_FALSE(m.degenerate);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(m.grid[i], i == 0 ? 1.0 : 0.0);
}

TEST(Saliency, ChannelAbsMax) {
  Tensor g({2, 2, 3});
  g.at(0, 0, 0) = -3;
  g.at(0, 0, 1) = 1;
  g.at(0, 0, 2) = 2;
  EXPECT_EQ(saliency_pooled(g, 2).at(0, 0), 3.0);
}

TEST(Saliency, PoolingPreservesMass) {
  SeededRng rng(6);
  const Tensor g = random_tensor({16, 16, 3}, rng, -1.0, 1.0);
  double magnitude = 0.0;
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      magnitude += std::max({std::abs(g.at(y, x, 0)), std::abs(g.at(y, x, 1)), std::abs(g.at(y, x, 2))});
  for (std::size_t grid : {1, 2, 4, 8, 16}) {
    const double block = 16.0 / static_cast<double>(grid);
    EXPECT_NEAR(sum(saliency_pooled(g, grid)) * block * block, magnitude, 1e-9);
  }
}

TEST(Saliency, BadShapes) {
  EXPECT_THROW(saliency_map(Tensor({8, 6, 3}), 2), DimensionError);
  EXPECT_THROW(saliency_map(Tensor({8, 8, 3}), 3), DimensionError);
}

// ---------------------------------------------------------------- Grad-CAM

TEST(GradCam, ZeroGradientIsDegenerate) {
  SeededRng rng(1);
  const AttributionMap m = grad_cam_vit(random_tensor({5, 6}, rng), Tensor({5, 6}), 2);
  EXPECT_TRUE(m.degenerate);
}

TEST(GradCam, OneHotActivationsGiveConstantMap) {
  Tensor act({5, 3}), grad({5, 3});
  for (std::size_t t = 0; t < 5; ++t) {
    act.at(t, 0) = 1.0;
    grad.at(t, 0) = 1.0;
  }
  EXPECT_EQ(grad_cam_scores(act, grad, 2), Tensor({2, 2}, 1.0));
  const AttributionMap m = grad_cam_vit(act, grad, 2);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.grid, Tensor({2, 2}));
}

TEST(GradCam, NegatedActivationsClampToZero) {
  SeededRng rng(2);
  const Tensor act = random_tensor({10, 4}, rng, 0.1, 1.0);
  const Tensor grad = random_tensor({10, 4}, rng, 0.1, 1.0);
  EXPECT_EQ(grad_cam_scores(scaled(act, -1.0), grad, 3), Tensor({3, 3}));
}

TEST(GradCam, WeightsComeFromPatchTokens) {
  // CLS gradient is ignored: channel weights are the patch-token mean.
  Tensor act({5, 2}), grad({5, 2});
  grad.at(0, 0) = 100.0;
  for (std::size_t t = 1; t < 5; ++t) {
    act.at(t, 0) = static_cast<double>(t);
    act.at(t, 1) = 1.0;
    grad.at(t, 1) = 2.0;
  }
  // weights (0, 2): score = 2 * act[:, 1] = 2 everywhere.
  EXPECT_EQ(grad_cam_scores(act, grad, 2), Tensor({2, 2}, 2.0));
}

TEST(GradCam, ShapeChecks) {
  EXPECT_THROW(grad_cam_vit(Tensor({5, 3}), Tensor({5, 4}), 2), DimensionError);
  EXPECT_THROW(grad_cam_vit(Tensor({6, 3}), Tensor({6, 3}), 2), DimensionError);
}

// ---------------------------------------------------------------- LRP

TEST(LrpRules, AffineByHand) {
  std::vector<ConservationRecord> log;
  const Tensor r = lrp::affine(Tensor::matrix({{1, 2}}), Tensor::matrix({{1}, {1}}), Tensor::vector({0}),
                               Tensor::matrix({{3}}), kLrpEpsilon, "x", log);
  EXPECT_EQ(r, Tensor::matrix({{1, 2}}));
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].relevance_in, 3.0);
  EXPECT_EQ(log[0].relevance_out, 3.0);
}

TEST(LrpRules, GuardOnlyCatchesTinyDenominators) {
  EXPECT_FALSE(lrp::guarded(0.5, 1e-6));
  EXPECT_FALSE(lrp::guarded(-1e-6, 1e-6));
  EXPECT_TRUE(lrp::guarded(1e-9, 1e-6));
  EXPECT_TRUE(lrp::guarded(-1e-9, 1e-6));
  EXPECT_TRUE(lrp::guarded(0.0, 1e-6));
  EXPECT_TRUE(lrp::guarded(std::nan(""), 1e-6));
}

TEST(LrpRules, GuardedCellSharesByContribution) {
  // z = 1*3 + 1*(-3) + 2*0 = 0: relevance 6 splits by |3| : |-3| : |0|.
  std::vector<ConservationRecord> log;
  const Tensor r = lrp::affine(Tensor::matrix({{1, 1, 2}}), Tensor::matrix({{3}, {-3}, {0}}), Tensor::vector({0}),
                               Tensor::matrix({{6}}), kLrpEpsilon, "x", log);
  EXPECT_EQ(r, Tensor::matrix({{3, 3, 0}}));
  // All contributions zero: uniform.
  const Tensor u = lrp::affine(Tensor::matrix({{0, 0}}), Tensor::matrix({{1}, {1}}), Tensor::vector({0}),
                               Tensor::matrix({{4}}), kLrpEpsilon, "x", log);
  EXPECT_EQ(u, Tensor::matrix({{2, 2}}));
  const auto [ru, rv] =
      lrp::residual(Tensor::matrix({{1}}), Tensor::matrix({{-1}}), Tensor::matrix({{5}}), kLrpEpsilon, "r", log);
  EXPECT_EQ(ru, Tensor::matrix({{2.5}}));
  EXPECT_EQ(rv, Tensor::matrix({{2.5}}));
  // z = 1*1 + 1*(-1): each contribution carries 2, split half to each operand.
  const auto [ra, rb] = lrp::matmul2(Tensor::matrix({{1, 1}}), Tensor::matrix({{1}, {-1}}), Tensor::matrix({{4}}),
                                     kLrpEpsilon, "m", log);
  EXPECT_EQ(ra, Tensor::matrix({{1, 1}}));
  EXPECT_EQ(rb, Tensor::matrix({{1}, {1}}));
  for (const ConservationRecord& rec : log) EXPECT_EQ(rec.relevance_in, rec.relevance_out) << rec.layer;
}

TEST(LrpRules, ResidualSplitsProportionally) {
  std::vector<ConservationRecord> log;
  const auto [ru, rv] =
      lrp::residual(Tensor::matrix({{1, -2}}), Tensor::matrix({{3, 6}}), Tensor::matrix({{8, 2}}), 1e-6, "r", log);
  EXPECT_EQ(ru, Tensor::matrix({{2, -1}}));
  EXPECT_EQ(rv, Tensor::matrix({{6, 3}}));
}

TEST(LrpRules, MatmulHalvesShares) {
  std::vector<ConservationRecord> log;
  // z = a b = [[1*2 + 1*2]] = 4, relevance 8 => each operand carries 4.
  const auto [ra, rb] =
      lrp::matmul2(Tensor::matrix({{1, 1}}), Tensor::matrix({{2}, {2}}), Tensor::matrix({{8}}), 1e-6, "m", log);
  EXPECT_EQ(ra, Tensor::matrix({{2, 2}}));
  EXPECT_EQ(rb, Tensor::matrix({{2}, {2}}));
  EXPECT_EQ(log[0].relevance_in, 8.0);
}

TEST(LrpAggregate, HandExample) {
  const Tensor g({1, 1, 2, 2}, {1, 1, 1, 1});
  const Tensor r({1, 1, 2, 2}, {0.5, -1, 2, 0});
  EXPECT_EQ(lrp_aggregate(g, r, 0), Tensor::matrix({{1.5, 0}, {2, 1}}));
}

TEST(LrpAggregate, PositivePartKeepsIdentityFloor) {
  SeededRng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor g = random_tensor({3, 2, 5, 5}, rng, -1.0, 1.0);
    const Tensor r = random_tensor({3, 2, 5, 5}, rng, -1.0, 1.0);
    const Tensor c = lrp_aggregate(g, r, trial % 3);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) EXPECT_GE(c.at(i, j), i == j ? 1.0 : 0.0);
  }
}

TEST(LrpAggregate, ZeroGradientsGiveIdentity) {
  SeededRng rng(8);
  const Tensor r = random_tensor({2, 2, 5, 5}, rng, -1.0, 1.0);
  EXPECT_EQ(lrp_aggregate(Tensor({2, 2, 5, 5}), r, 0), Tensor::identity(5));
}

TEST(Lrp, ZeroGradientsGiveDegenerateMap) {
  const ViTParams p = init_params(ViTConfig{});
  const ForwardTrace tr = forward(p, random_image(p.config, 1));
  BackwardTrace bt = backward(p, tr, 0);
  bt.attn_grad = Tensor(bt.attn_grad.shape());
  const AttributionMap m = lrp_relevance(tr, bt, p, 0);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.grid, Tensor({4, 4}));
}

TEST(Lrp, AffineLayersConserveRelevance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ViTConfig c;
    c.seed = seed;
    const ViTParams p = init_params(c);
    const ForwardTrace tr = forward(p, random_image(c, 1000 + seed));
    const LrpResult res = lrp_propagate(p, tr, seed % c.num_classes);
    std::size_t affine = 0;
    for (const ConservationRecord& rec : res.conservation) {
      if (rec.kind != ConservationRecord::Kind::Affine) continue;
      ++affine;
      EXPECT_LT(rec.relative_drift(), 1e-6) << "seed " << seed << " layer " << rec.layer;
    }
    EXPECT_EQ(affine, 1 + 6 * c.depth);
  }
}

TEST(Lrp, RelevanceFlowsIntoEveryAttentionMap) {
  const ViTParams p = sharpened_model(ViTConfig{}, 5.0);
  const ForwardTrace tr = forward(p, random_image(p.config, 3));
  const LrpResult res = lrp_propagate(p, tr, 1);
  EXPECT_EQ(res.attn_relevance.shape(), tr.attn.shape());
  EXPECT_TRUE(all_finite(res.attn_relevance));
  for (std::size_t l = 0; l < 2; ++l) {
    double mass = 0.0;
    for (double v : res.attn_relevance.slice(l).values()) mass += std::abs(v);
    EXPECT_GT(mass, 0.0);
  }
}

TEST(Lrp, MismatchedTracesRejected) {
  const ViTParams p = init_params(ViTConfig{});
  const ForwardTrace tr = forward(p, random_image(p.config, 1));
  const BackwardTrace bt = backward(p, tr, 1);
  EXPECT_THROW(lrp_relevance(tr, bt, p, 2), ArgumentError);
  ViTConfig deeper;
  deeper.depth = 3;
  const ViTParams q = init_params(deeper);
  EXPECT_THROW(lrp_relevance(forward(q, random_image(deeper, 1)), bt, p, 1), ArgumentError);
  EXPECT_THROW(lrp_propagate(p, tr, 9), ArgumentError);
}

// ---------------------------------------------------------------- all methods

TEST(Methods, MapsAreUnitRangeAndDeterministic) {
  const ViTParams p = sharpened_model(ViTConfig{}, 5.0);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const ForwardTrace tr = forward(p, random_image(p.config, s));
    const BackwardTrace bt = backward(p, tr, predict(tr).class_index);
    const std::size_t g = p.config.grid();
    const AttributionMap maps[] = {attention_rollout(tr.attn, 0), saliency_map(bt.input_grad, g),
                                   grad_cam_vit(tr.last_block_tokens, bt.last_block_tokens_grad, g),
                                   lrp_relevance(tr, bt, p, bt.class_index)};
    for (const AttributionMap& m : maps) {
      EXPECT_EQ(m.grid.shape(), (Shape{g, g}));
      expect_unit_range(m);
    }
    EXPECT_EQ(maps[0].grid, attention_rollout(tr.attn, 0).grid);
    EXPECT_EQ(maps[3].grid, lrp_relevance(tr, bt, p, bt.class_index).grid);
    EXPECT_EQ(maps[1].methods, std::vector<MethodId>{MethodId::Saliency});
  }
}
