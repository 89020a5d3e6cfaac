#include <gtest/gtest.h>

#include <cmath>

#include "megatron/errors.hpp"
#include "megatron/trigger.hpp"
#include "oracles.hpp"

namespace megatron {
namespace {

using trigger::PcgradMode;
using vit::Matrix;

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

TEST(LatentLoss, IdenticalIsZero) {
  Rng rng(1);
  const Matrix a = testing::random_stochastic(rng, 5);
  EXPECT_EQ(trigger::latent_loss(a, a), 0.0);
}

TEST(LatentLoss, SingleEntryDifference) {
  Matrix a = Matrix::Zero(3, 3), b = Matrix::Zero(3, 3);
  b(1, 2) = 0.5;
  EXPECT_EQ(trigger::latent_loss(a, b), 0.25);
}

TEST(LatentLoss, MatchesElementwiseSum) {
  Rng rng(2);
  for (int n = 0; n < 50; ++n) {
    const Matrix a = testing::random_stochastic(rng, 9), b = testing::random_stochastic(rng, 9);
    double s = 0.0;
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) s += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
    EXPECT_NEAR(trigger::latent_loss(a, b), s, 1e-10);
  }
  EXPECT_THROW(trigger::latent_loss(Matrix::Zero(2, 2), Matrix::Zero(3, 3)), DimensionError);
}

TEST(Pcgrad, OrthogonalIsSum) {
  EXPECT_EQ(trigger::pcgrad(std::vector<double>{1, 0}, std::vector<double>{0, 1}, PcgradMode::Standard),
            (std::vector<double>{1, 1}));
}

TEST(Pcgrad, OppositeGradientsCancel) {
  EXPECT_EQ(trigger::pcgrad(std::vector<double>{1, 0}, std::vector<double>{-1, 0}, PcgradMode::Standard),
            (std::vector<double>{0, 0}));
}

TEST(Pcgrad, AlignedIsSum) {
  EXPECT_EQ(trigger::pcgrad(std::vector<double>{1, 1}, std::vector<double>{2, 2}, PcgradMode::Standard),
            (std::vector<double>{3, 3}));
}

TEST(Pcgrad, ZeroGradientIsSum) {
  EXPECT_EQ(trigger::pcgrad(std::vector<double>{1, -2}, std::vector<double>{0, 0}, PcgradMode::Standard),
            (std::vector<double>{1, -2}));
  EXPECT_EQ(trigger::pcgrad(std::vector<double>{0, 0}, std::vector<double>{3, 1}, PcgradMode::Literal),
            (std::vector<double>{3, 1}));
}

TEST(Pcgrad, ShapeMismatchThrows) {
  EXPECT_THROW(trigger::pcgrad(std::vector<double>{1}, std::vector<double>{1, 2}, PcgradMode::Standard),
               DimensionError);
  EXPECT_THROW(trigger::pcgrad(Image(1, 2, 2), Image(1, 2, 3), PcgradMode::Standard), DimensionError);
}

std::pair<std::vector<double>, std::vector<double>> random_pair(Rng& rng, std::size_t n, bool conflict) {
  while (true) {
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = rng.uniform(-1.0, 1.0);
    for (auto& v : b) v = rng.uniform(-1.0, 1.0);
    if ((dot(a, b) < 0.0) == conflict) return {a, b};
  }
}

TEST(Pcgrad, ConflictBranchIsOrthogonalToBeta) {
  Rng rng(3);
  for (int n = 0; n < 1000; ++n) {
    const auto [a, b] = random_pair(rng, 2 + rng.index(30), true);
    const auto d = trigger::pcgrad(a, b, PcgradMode::Standard);
    EXPECT_LE(std::abs(dot(d, b)), 1e-6 * norm(d) * norm(b) + 1e-300);
  }
}

TEST(Pcgrad, NonConflictBranchIsExactSum) {
  Rng rng(4);
  for (int n = 0; n < 1000; ++n) {
    const auto [a, b] = random_pair(rng, 2 + rng.index(30), false);
    for (auto mode : {PcgradMode::Standard, PcgradMode::Literal}) {
      const auto d = trigger::pcgrad(a, b, mode);
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(d[i], a[i] + b[i]);
    }
  }
}

TEST(Pcgrad, LiteralModeAddsTheProjection) {
  Rng rng(5);
  for (int n = 0; n < 1000; ++n) {
    const auto [a, b] = random_pair(rng, 2 + rng.index(30), true);
    const auto d = trigger::pcgrad(a, b, PcgradMode::Literal);
    const double c = dot(a, b) / dot(b, b);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(d[i], a[i] + c * b[i], 1e-12);
    EXPECT_NEAR(dot(d, b), 2.0 * dot(a, b), 1e-9);
  }
}

TEST(Pcgrad, ConflictDirectionIsScaleInvariant) {
  Rng rng(6);
  for (int n = 0; n < 200; ++n) {
    auto [a, b] = random_pair(rng, 8, true);
    const auto d1 = trigger::pcgrad(a, b, PcgradMode::Standard);
    const double c = 0.1 + 10.0 * rng.uniform();
    for (auto& v : b) v *= c;
    const auto d2 = trigger::pcgrad(a, b, PcgradMode::Standard);
    EXPECT_NEAR(dot(d1, d2) / (norm(d1) * norm(d2)), 1.0, 1e-9);
  }
}

TEST(SplitMasks, SingleMaskIsFullTrigger) {
  const auto m = trigger::split_masks(5, 3, 1);
  ASSERT_EQ(m.size(), 1u);
  for (double v : m[0].raw()) EXPECT_EQ(v, 1.0);
}

TEST(SplitMasks, ThirtyTwoByThirtyTwoIntoEightBands) {
  const auto m = trigger::split_masks(32, 32, 8);
  ASSERT_EQ(m.size(), 8u);
  for (int i = 0; i < 8; ++i) {
    double total = 0.0;
    for (double v : m[i].raw()) total += v;
    EXPECT_EQ(total, 128.0);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) EXPECT_EQ(m[i].at(0, y, x), y / 4 == i ? 1.0 : 0.0);
  }
}

TEST(SplitMasks, PartitionForEveryK) {
  for (int w : {1, 3, 8, 10})
    for (int h : {1, 4, 7}) {
      for (int k = 1; k <= w * h; ++k) {
        const auto masks = trigger::split_masks(w, h, k);
        ASSERT_EQ(masks.size(), static_cast<std::size_t>(k));
        for (int i = 0; i < w * h; ++i) {
          double sum = 0.0;
          for (const auto& m : masks) {
            EXPECT_TRUE(m.raw()[i] == 0.0 || m.raw()[i] == 1.0);
            sum += m.raw()[i];
          }
          EXPECT_EQ(sum, 1.0);
        }
        for (const auto& m : masks) {
          double count = 0.0;
          for (double v : m.raw()) count += v;
          EXPECT_GE(count, (w * h) / k);
        }
      }
      EXPECT_THROW(trigger::split_masks(w, h, w * h + 1), InputError);
      EXPECT_THROW(trigger::split_masks(w, h, 0), InputError);
    }
}

TEST(SubTrigger, EqualTransparencyCollapses) {
  Rng rng(7);
  const Image t = testing::random_image(rng, 3, 8, 8);
  const auto masks = trigger::split_masks(8, 8, 4);
  for (double phi : {0.0, 0.3, 1.0}) {
    const auto s = trigger::make_sub_trigger(t, masks[1], phi, phi, 1);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(s.pattern.raw()[i], phi * t.raw()[i]);
  }
}

TEST(SubTrigger, FullActiveZeroDormant) {
  Rng rng(8);
  const Image t = testing::random_image(rng, 3, 8, 8);
  const auto masks = trigger::split_masks(8, 8, 2);
  const auto s = trigger::make_sub_trigger(t, masks[0], 1.0, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) EXPECT_EQ(s.pattern.at(c, y, x), y < 4 ? t.at(c, y, x) : 0.0);
}

TEST(SubTrigger, DefaultBlendOnOnes) {
  const Image t(3, 8, 8, 1.0);
  const auto masks = trigger::split_masks(8, 8, 2);
  const auto s = trigger::make_sub_trigger(t, masks[0], 0.5, 0.1);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) EXPECT_EQ(s.pattern.at(c, y, x), y < 4 ? 0.5 : 0.1);
}

TEST(SubTrigger, LinearInPattern) {
  Rng rng(9);
  const Image t = testing::random_image(rng, 3, 8, 8);
  const auto masks = trigger::split_masks(8, 8, 8);
  for (double c : {0.0, 0.25, 0.5, 1.0}) {
    Image ct = t;
    for (double& v : ct.raw()) v *= c;
    const auto a = trigger::make_sub_trigger(ct, masks[3], 0.5, 0.1);
    const auto b = trigger::make_sub_trigger(t, masks[3], 0.5, 0.1);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(a.pattern.raw()[i], c * b.pattern.raw()[i], 1e-15);
  }
}

TEST(SubTrigger, InvalidInputs) {
  const Image t(3, 4, 4, 1.0);
  const auto masks = trigger::split_masks(4, 4, 2);
  EXPECT_THROW(trigger::make_sub_trigger(t, masks[0], 1.5, 0.1), InputError);
  EXPECT_THROW(trigger::make_sub_trigger(t, masks[0], 0.5, -0.1), InputError);
  EXPECT_THROW(trigger::make_sub_trigger(t, Image(1, 4, 5), 0.5, 0.1), DimensionError);
  EXPECT_THROW(trigger::make_sub_trigger(t, Image(1, 4, 4, 0.5), 0.5, 0.1), InputError);
}

TEST(SubTrigger, MakeAllAssignsIndices) {
  const auto subs = trigger::make_sub_triggers(Image(3, 8, 8, 1.0), 8, 0.5, 0.1);
  ASSERT_EQ(subs.size(), 8u);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(subs[i].index, i);
}

trigger::SubTrigger constant_sub(double v) {
  trigger::SubTrigger s;
  s.pattern = Image(3, 4, 4, v);
  s.mask = Image(1, 4, 4, 1.0);
  return s;
}

TEST(PatchImage, ZeroSubTriggerIsIdentity) {
  Rng rng(10);
  const ImageSample x{testing::random_image(rng, 3, 8, 8), 1, "a"};
  const auto y = trigger::patch_image(x, constant_sub(0.0), {2, 3});
  EXPECT_EQ(y.pixels, x.pixels);
  EXPECT_EQ(y.label, 1);
}

TEST(PatchImage, BlackImageTakesPattern) {
  const ImageSample x{Image(3, 8, 8), 0, "b"};
  const auto y = trigger::patch_image(x, constant_sub(0.5), {4, 0});
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 8; ++r)
      for (int col = 0; col < 8; ++col)
        EXPECT_EQ(y.pixels.at(c, r, col), (r < 4 && col >= 4) ? 0.5 : 0.0);
}

TEST(PatchImage, WhiteImageClipsToOne) {
  const ImageSample x{Image(3, 8, 8, 1.0), 0, "w"};
  Rng rng(11);
  auto sub = constant_sub(0.0);
  for (double& v : sub.pattern.raw()) v = 0.01 + rng.uniform();
  const auto y = trigger::patch_image(x, sub, {0, 0});
  for (double v : y.pixels.raw()) EXPECT_EQ(v, 1.0);
}

TEST(PatchImage, OutOfBoundsIsInputError) {
  const ImageSample x{Image(3, 8, 8), 0, "o"};
  EXPECT_THROW(trigger::patch_image(x, constant_sub(0.1), {5, 0}), InputError);
  EXPECT_THROW(trigger::patch_image(x, constant_sub(0.1), {-1, 0}), InputError);
}

// One-layer surrogate on 8x8 images, patch 4: five tokens.
vit::Model toy_surrogate() {
  auto cfg = testing::tiny_config();
  cfg.n_layers = 1;
  cfg.n_classes = 2;
  return testing::random_model(cfg, 42);
}

Dataset toy_pool(int n) {
  Rng rng(12);
  Dataset d;
  for (int i = 0; i < n; ++i) d.push_back({testing::random_image(rng, 3, 8, 8), i % 2, "s" + std::to_string(i)});
  return d;
}

trigger::TriggerConfig toy_trigger() {
  trigger::TriggerConfig c;
  c.width = 4;
  c.height = 4;
  c.location = {4, 4};
  c.seed = 3;
  return c;
}

TEST(GenerateTrigger, ZeroIterationsReturnsInitialisation) {
  const auto m = toy_surrogate();
  auto cfg = toy_trigger();
  cfg.max_iters = 0;
  for (auto mode : {trigger::InitMode::Uniform, trigger::InitMode::Zeros}) {
    cfg.init_mode = mode;
    const auto t = trigger::generate_trigger(m, toy_pool(4), 0, 1, cfg);
    EXPECT_EQ(t.pattern, trigger::initial_pattern(cfg, 3));
    EXPECT_EQ(t.iterations_used, 0);
    EXPECT_FALSE(t.final_loss.has_value());
  }
  EXPECT_TRUE(on_u8_grid(trigger::initial_pattern(cfg, 3)));
}

TEST(GenerateTrigger, ZeroGammaIgnoresDiffusionTerm) {
  const auto m = toy_surrogate();
  auto cfg = toy_trigger();
  cfg.max_iters = 20;
  cfg.lr = 0.1;
  cfg.gamma = 0.0;
  const auto a = trigger::generate_trigger(m, toy_pool(6), 0, 1, cfg);
  cfg.pcgrad_mode = PcgradMode::Literal;
  cfg.score_normalization = rollout::ScoreNormalization::SumAbs;
  cfg.clamp_rollout = true;
  const auto b = trigger::generate_trigger(m, toy_pool(6), 0, 1, cfg);
  EXPECT_EQ(a.pattern, b.pattern);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].latent, b.history[i].latent);
    EXPECT_EQ(a.history[i].combined, a.history[i].latent);
  }
}

TEST(GenerateTrigger, DescendsOnToySurrogate) {
  const auto m = toy_surrogate();
  auto cfg = toy_trigger();
  cfg.max_iters = 51;
  cfg.lr = 0.05;
  const auto t = trigger::generate_trigger(m, toy_pool(2), 0, 1, cfg);
  ASSERT_EQ(t.history.size(), 51u);
  EXPECT_LE(t.history[50].combined, t.history[0].combined);
  for (double v : t.pattern.raw()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(GenerateTrigger, SmallStepWindowsMostlyNonIncreasing) {
  const auto m = toy_surrogate();
  auto cfg = toy_trigger();
  cfg.max_iters = 200;
  cfg.lr = 1e-2;
  const auto t = trigger::generate_trigger(m, toy_pool(2), 0, 1, cfg);
  int ok = 0, windows = 0;
  for (std::size_t i = 0; i + 10 < t.history.size(); ++i, ++windows)
    if (t.history[i + 10].combined <= t.history[i].combined) ++ok;
  EXPECT_GE(ok, 0.9 * windows);
}

TEST(GenerateTrigger, StopsAtThreshold) {
  const auto m = toy_surrogate();
  auto cfg = toy_trigger();
  cfg.max_iters = 10;
  cfg.tau = 1e9;
  const auto t = trigger::generate_trigger(m, toy_pool(2), 0, 1, cfg);
  EXPECT_EQ(t.iterations_used, 0);
  EXPECT_EQ(t.history.size(), 1u);
}

TEST(GenerateTrigger, SeededAndDeterministic) {
  const auto m = toy_surrogate();
  auto cfg = toy_trigger();
  cfg.max_iters = 5;
  const auto a = trigger::generate_trigger(m, toy_pool(6), std::nullopt, 1, cfg);
  const auto b = trigger::generate_trigger(m, toy_pool(6), std::nullopt, 1, cfg);
  EXPECT_EQ(a.pattern, b.pattern);
  EXPECT_TRUE(on_u8_grid(a.pattern));
}

TEST(GenerateTrigger, EmptyPoolsAreInputErrors) {
  const auto m = toy_surrogate();
  auto cfg = toy_trigger();
  Dataset only_targets = {{Image(3, 8, 8), 1, "t"}};
  Dataset only_sources = {{Image(3, 8, 8), 0, "s"}};
  EXPECT_THROW(trigger::generate_trigger(m, only_targets, 0, 1, cfg), InputError);
  EXPECT_THROW(trigger::generate_trigger(m, only_sources, 0, 1, cfg), InputError);
  cfg.location = {6, 6};
  EXPECT_THROW(trigger::generate_trigger(m, toy_pool(4), 0, 1, cfg), InputError);
}

}  // namespace
}  // namespace megatron
