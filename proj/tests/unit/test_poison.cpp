#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <set>

#include "megatron/errors.hpp"
#include "megatron/metrics.hpp"
#include "megatron/poison.hpp"
#include "oracles.hpp"

namespace megatron {
namespace {

using poison::PoisonConfig;

TEST(ProjectLinf, InsideBandUnchanged) {
  Rng rng(1);
  const Image c = testing::random_image(rng, 3, 4, 4);
  Image x = c;
  for (double& v : x.raw()) v = std::clamp(v + rng.uniform(-0.05, 0.05), 0.0, 1.0);
  EXPECT_EQ(poison::project_linf(x, c, 0.05), x);
}

TEST(ProjectLinf, ZeroEpsilonClipsToCenter) {
  Rng rng(2);
  const Image c = testing::random_image(rng, 3, 4, 4);
  EXPECT_EQ(poison::project_linf(testing::random_image(rng, 3, 4, 4), c, 0.0), clip01(c));
}

TEST(ProjectLinf, ClampsToUpperEdge) {
  Rng rng(3);
  const Image c = testing::random_image(rng, 3, 4, 4);
  Image x = c;
  for (double& v : x.raw()) v += 0.3;
  const Image p = poison::project_linf(x, c, 0.1);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_DOUBLE_EQ(p.raw()[i], std::min(1.0, c.raw()[i] + 0.1));
}

TEST(ProjectLinf, ShapeMismatchThrows) {
  EXPECT_THROW(poison::project_linf(Image(1, 2, 2), Image(1, 2, 3), 0.1), DimensionError);
}

vit::Model tiny_surrogate(std::uint64_t seed = 4) {
  auto cfg = testing::tiny_config();
  cfg.n_classes = 2;
  return testing::random_model(cfg, seed);
}

TEST(PoisonSample, ZeroStepsReturnsTarget) {
  const auto m = tiny_surrogate();
  Rng rng(5);
  const ImageSample xt{testing::random_image(rng, 3, 8, 8), 1, "t"};
  const ImageSample xa{testing::random_image(rng, 3, 8, 8), 0, "a"};
  PoisonConfig cfg;
  cfg.steps = 0;
  const auto r = poison::poison_sample(m, xt, xa, cfg, 2);
  EXPECT_EQ(r.poisoned.pixels, xt.pixels);
  EXPECT_EQ(r.final_feature_dist, r.initial_feature_dist);
  EXPECT_EQ(r.poisoned.label, 1);
  EXPECT_EQ(r.target_origin, "t");
  EXPECT_EQ(r.patched_source_id, "a");
  EXPECT_EQ(r.sub_trigger_index, 2);
}

TEST(PoisonSample, ZeroEpsilonReturnsTarget) {
  const auto m = tiny_surrogate();
  Rng rng(6);
  const ImageSample xt{testing::random_image(rng, 3, 8, 8), 1, "t"};
  const ImageSample xa{testing::random_image(rng, 3, 8, 8), 0, "a"};
  PoisonConfig cfg;
  cfg.epsilon = 0.0;
  cfg.steps = 25;
  const auto r = poison::poison_sample(m, xt, xa, cfg);
  EXPECT_EQ(r.poisoned.pixels, xt.pixels);
  EXPECT_EQ(r.linf_used, 0.0);
}

TEST(PoisonSample, RecordInvariantsOnRandomPairs) {
  const auto m = tiny_surrogate();
  Rng rng(7);
  for (int n = 0; n < 20; ++n) {
    const ImageSample xt{quantize_u8(testing::random_image(rng, 3, 8, 8)), 1, "t"};
    const ImageSample xa{testing::random_image(rng, 3, 8, 8), 0, "a"};
    PoisonConfig cfg;
    cfg.steps = 15;
    cfg.lr = 0.5;
    cfg.quantize = n % 2 == 0;
    const auto r = poison::poison_sample(m, xt, xa, cfg);
    EXPECT_LE(r.linf_used, cfg.epsilon + 1e-8);
    EXPECT_LE(linf_distance(r.poisoned.pixels, xt.pixels), cfg.epsilon + 1e-8);
    EXPECT_LE(r.final_feature_dist, r.initial_feature_dist);
    for (double v : r.poisoned.pixels.raw()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_GE(metrics::psnr(r.poisoned.pixels, xt.pixels), -20.0 * std::log10(cfg.epsilon) - 1e-9);
    if (cfg.quantize) EXPECT_TRUE(on_u8_grid(r.poisoned.pixels));
    const vit::Vector fa = vit::forward_one(m, xa.pixels).features.row(0).transpose();
    EXPECT_NEAR(poison::feature_distance(m, r.poisoned.pixels, fa), r.final_feature_dist, 1e-12);
  }
}

// Features of a layer-free, mean-pooled, un-normalised model are affine in
// the pixels: f(x) = A x + c.
struct LinearToy {
  vit::Model model;
  Eigen::MatrixXd a;
  Eigen::VectorXd c;
};

LinearToy linear_toy() {
  auto cfg = testing::tiny_config();
  cfg.n_layers = 0;
  cfg.pooling = vit::Pooling::Mean;
  cfg.final_norm = false;
  LinearToy t{testing::random_model(cfg, 8), {}, {}};
  const Image zero(3, 8, 8);
  t.c = vit::forward_one(t.model, zero).features.row(0).transpose();
  t.a.resize(cfg.embed_dim, zero.size());
  for (std::size_t i = 0; i < zero.size(); ++i) {
    Image e = zero;
    e.raw()[i] = 1.0;
    t.a.col(static_cast<Eigen::Index>(i)) = vit::forward_one(t.model, e).features.row(0).transpose() - t.c;
  }
  return t;
}

TEST(PoisonSample, LinearFeatureToyMatchesClosedFormDescent) {
  const auto toy = linear_toy();
  Rng rng(9);
  const Image xt = testing::random_image(rng, 3, 8, 8);
  const double eps = 0.1;
  // x_a inside the band: the constrained optimum is x_a with distance 0.
  Image xa = xt;
  for (double& v : xa.raw()) v = std::clamp(v + rng.uniform(-0.5 * eps, 0.5 * eps), 0.0, 1.0);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(toy.a * toy.a.transpose());
  PoisonConfig cfg;
  cfg.epsilon = eps;
  cfg.steps = 200;
  cfg.lr = 0.5 / es.eigenvalues().maxCoeff();
  cfg.quantize = false;
  const auto r = poison::poison_sample(toy.model, {xt, 1, "t"}, {xa, 0, "a"}, cfg);

  // Straight-line projected descent on f(x) = A x + c.
  const Eigen::Map<const Eigen::VectorXd> vt(xt.raw().data(), xt.size()), va(xa.raw().data(), xa.size());
  Eigen::VectorXd x = vt;
  const Eigen::VectorXd fa = toy.a * va;
  double best = (toy.a * x - fa).squaredNorm();
  const double initial = best;
  for (int s = 0; s < cfg.steps; ++s) {
    x -= cfg.lr * 2.0 * toy.a.transpose() * (toy.a * x - fa);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = std::clamp(std::clamp(x(i), vt(i) - eps, vt(i) + eps), 0.0, 1.0);
    best = std::min(best, (toy.a * x - fa).squaredNorm());
  }
  EXPECT_NEAR(r.initial_feature_dist, initial, 1e-9 * (1.0 + initial));
  EXPECT_NEAR(r.final_feature_dist, best, 1e-9 * (1.0 + initial));
  EXPECT_LE(std::sqrt(r.final_feature_dist), 0.5 * std::sqrt(r.initial_feature_dist));
}

Dataset labelled_pool(int n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (int i = 0; i < n; ++i)
    d.push_back({quantize_u8(testing::random_image(rng, 3, 8, 8)), i % 2, "p" + std::to_string(i)});
  return d;
}

std::vector<trigger::SubTrigger> subs_for(int k) {
  Rng rng(10);
  return trigger::make_sub_triggers(quantize_u8(testing::random_image(rng, 3, 4, 4)), k, 0.5, 0.1);
}

TEST(BuildPoisoned, ZeroCountLeavesDatasetUnchanged) {
  const auto d = labelled_pool(20, 11);
  PoisonConfig cfg;
  cfg.poison_count = 0;
  const auto p = poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(8), {4, 4}, 0, 1, cfg);
  EXPECT_TRUE(p.records.empty());
  ASSERT_EQ(p.samples.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(p.samples[i].pixels, d[i].pixels);
}

TEST(BuildPoisoned, EightPoisonsUseEachSubTriggerOnce) {
  const auto d = labelled_pool(40, 12);
  PoisonConfig cfg;
  cfg.poison_count = 8;
  cfg.steps = 3;
  const auto p = poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(8), {4, 4}, 0, 1, cfg);
  std::multiset<int> used;
  for (const auto& r : p.records) used.insert(r.sub_trigger_index);
  for (int k = 0; k < 8; ++k) EXPECT_EQ(used.count(k), 1u);
}

TEST(BuildPoisoned, TenPercentOfTwoThousand) {
  const auto d = labelled_pool(2000, 13);
  PoisonConfig cfg;
  cfg.poison_rate = 0.1;
  cfg.steps = 2;
  cfg.jobs = 2;
  const auto p = poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(8), {4, 4}, 0, 1, cfg);
  ASSERT_EQ(p.records.size(), 200u);
  std::set<std::size_t> positions(p.positions.begin(), p.positions.end());
  EXPECT_EQ(positions.size(), 200u);
  std::set<std::string> sources;
  for (std::size_t j = 0; j < p.records.size(); ++j) {
    const auto& r = p.records[j];
    EXPECT_LE(r.linf_used, cfg.epsilon + 1e-8);
    EXPECT_LE(r.final_feature_dist, r.initial_feature_dist);
    EXPECT_EQ(r.sub_trigger_index, static_cast<int>(j % 8));
    EXPECT_EQ(r.poisoned.label, 1);
    EXPECT_EQ(d[p.positions[j]].id, r.target_origin);
    sources.insert(r.patched_source_id);
  }
  EXPECT_EQ(sources.size(), 200u);
  // Clean-label: no label changes anywhere.
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(p.samples[i].label, d[i].label);
    EXPECT_EQ(p.samples[i].id, d[i].id);
    if (!positions.count(i)) EXPECT_EQ(p.samples[i].pixels, d[i].pixels);
  }
}

TEST(BuildPoisoned, DeterministicAcrossJobCounts) {
  const auto d = labelled_pool(60, 14);
  PoisonConfig cfg;
  cfg.poison_count = 12;
  cfg.steps = 4;
  cfg.k = 4;
  cfg.seed = 77;
  const auto a = poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(4), {0, 4}, 0, 1, cfg);
  cfg.jobs = 3;
  const auto b = poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(4), {0, 4}, 0, 1, cfg);
  EXPECT_EQ(a.positions, b.positions);
  for (std::size_t j = 0; j < a.records.size(); ++j) {
    EXPECT_EQ(a.records[j].poisoned.pixels, b.records[j].poisoned.pixels);
    EXPECT_EQ(a.records[j].final_feature_dist, b.records[j].final_feature_dist);
  }
}

TEST(BuildPoisoned, AnyToOneDrawsFromAllNonTargetLabels) {
  Dataset d = labelled_pool(30, 15);
  for (std::size_t i = 0; i < d.size(); i += 4) d[i].label = 2;  // third class
  auto m = testing::tiny_config();
  m.n_classes = 3;
  PoisonConfig cfg;
  cfg.mode = poison::Mode::AnyToOne;
  cfg.poison_count = 10;
  cfg.steps = 1;
  cfg.k = 2;
  const auto p = poison::build_poisoned_dataset(d, testing::random_model(m, 16), subs_for(2), {4, 4},
                                                std::nullopt, 1, cfg);
  std::set<int> labels;
  for (const auto& r : p.records)
    for (const auto& s : d)
      if (s.id == r.patched_source_id) labels.insert(s.label);
  EXPECT_FALSE(labels.count(1));
  EXPECT_EQ(labels.size(), 2u);
}

TEST(BuildPoisoned, InsufficientPoolsAreInputErrors) {
  const auto d = labelled_pool(10, 17);
  PoisonConfig cfg;
  cfg.poison_count = 6;  // only 5 targets
  EXPECT_THROW(poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(8), {4, 4}, 0, 1, cfg), InputError);
  cfg.poison_count = 2;
  EXPECT_THROW(poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(4), {4, 4}, 0, 1, cfg), InputError);
  EXPECT_THROW(poison::build_poisoned_dataset(d, tiny_surrogate(), subs_for(8), {4, 4}, std::nullopt, 1, cfg),
               InputError);
}

TEST(PoisonConfig, Validation) {
  PoisonConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epsilon = 1.5;
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.steps = -1;
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.poison_count = -2;
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  EXPECT_EQ(c.resolve_count(2000), 200);
  c.poison_count = 7;
  EXPECT_EQ(c.resolve_count(2000), 7);
}

}  // namespace
}  // namespace megatron
