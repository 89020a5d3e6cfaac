#include <benchmark/benchmark.h>

#include "megatron/metrics.hpp"
#include "megatron/random.hpp"
#include "megatron/rollout.hpp"
#include "megatron/vit.hpp"

namespace {

using namespace megatron;

// Desk-scale model: 32x32 inputs, patch 4, 4 layers, dim 64.
vit::ModelConfig desk() {
  vit::ModelConfig c;
  c.image_size = 32;
  c.patch_size = 4;
  c.n_layers = 4;
  c.n_heads = 4;
  c.embed_dim = 64;
  return c;
}

Image noise(std::uint64_t seed, int size) {
  Rng rng(seed);
  Image img(3, size, size);
  for (double& v : img.raw()) v = rng.uniform();
  return img;
}

void BM_Forward(benchmark::State& state) {
  const auto cfg = desk();
  const auto params = vit::init_params(cfg, 1);
  const Image x = noise(2, cfg.image_size);
  for (auto _ : state) benchmark::DoNotOptimize(vit::forward(cfg, params, x));
}
BENCHMARK(BM_Forward);

void BM_ForwardBatch(benchmark::State& state) {
  const vit::Model m{desk(), vit::init_params(desk(), 1)};
  std::vector<Image> xs;
  for (int i = 0; i < state.range(0); ++i) xs.push_back(noise(10 + i, 32));
  std::vector<const Image*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  for (auto _ : state) benchmark::DoNotOptimize(vit::forward_batch(m, ptrs));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBatch)->Arg(1)->Arg(32);

void BM_GradWrtAttention(benchmark::State& state) {
  const auto cfg = desk();
  const auto params = vit::init_params(cfg, 1);
  const Image x = noise(3, cfg.image_size);
  for (auto _ : state) benchmark::DoNotOptimize(vit::grad_wrt_attention(cfg, params, x, 1));
}
BENCHMARK(BM_GradWrtAttention);

void BM_Rollout(benchmark::State& state) {
  const auto cfg = desk();
  const auto stack = vit::grad_wrt_attention(cfg, vit::init_params(cfg, 1), noise(4, 32), 1);
  for (auto _ : state) benchmark::DoNotOptimize(rollout::grad_attention_rollout(stack));
}
BENCHMARK(BM_Rollout);

void BM_TrainStep(benchmark::State& state) {
  const auto cfg = desk();
  Dataset d;
  for (int i = 0; i < 32; ++i) d.push_back({noise(100 + i, 32), i % 2, std::to_string(i)});
  vit::TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  for (auto _ : state) benchmark::DoNotOptimize(vit::train(cfg, tc, d));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const Image a = noise(5, 32), b = noise(6, 32);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::ssim(a, b));
}
BENCHMARK(BM_Ssim);

}  // namespace
BENCHMARK_MAIN();
