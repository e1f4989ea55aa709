#include <benchmark/benchmark.h>

#include <random>

#include "sfe/invedit.hpp"
#include "sfe/manifold.hpp"
#include "sfe/metrics.hpp"
#include "sfe/semask.hpp"
#include "sfe/train.hpp"
#include "toy.hpp"

using namespace sfe;

namespace {

TrainConfig desk_like() {
  TrainConfig c = sfe::testing::toy_config();
  c.model.latent_dim = 64;
  c.model.geometry_width = 64;
  c.model.geometry_depth = 4;
  c.model.appearance_width = 64;
  c.model.appearance_depth = 4;
  c.model.descriptor_dim = 64;
  c.model.mapping_width = 64;
  c.model.num_levels = 8;
  c.model.coarse_samples = 32;
  c.render = {32, 32};
  validate(c);
  return c;
}

void BM_CompositeWeights(benchmark::State& state) {
  std::mt19937_64 g(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> sigma(static_cast<std::size_t>(state.range(0)));
  for (auto& s : sigma) s = u(g);
  for (auto _ : state) benchmark::DoNotOptimize(semask::composite_weights<double>(sigma, 0));
}
BENCHMARK(BM_CompositeWeights)->Arg(8)->Arg(24);

void BM_IntersectRays(benchmark::State& state) {
  Rng rng(2);
  const manifold::ManifoldNetwork field(rng, 64, 2);
  const auto levels = manifold::IsoLevels::equally_spaced(0.35, 1.25, 8);
  const auto rays = manifold::generate_rays(CameraPose{}, 32, 32, manifold::Intrinsics{});
  for (auto _ : state) {
    benchmark::DoNotOptimize(manifold::intersect_rays(field, levels, rays, static_cast<int>(state.range(0))));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rays.size()));
}
BENCHMARK(BM_IntersectRays)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_RenderFrame(benchmark::State& state) {
  const render::Generator gen(desk_like(), 3);
  Rng rng(4);
  const auto latents = render::sample_latents(rng, gen, 1);
  const CameraPose pose;
  const int side = static_cast<int>(state.range(0));
  for (auto _ : state) {
    ad::NoGradGuard ng;
    benchmark::DoNotOptimize(
        render::render(gen, render::map_latents(gen, latents), std::span<const CameraPose>(&pose, 1), side, side));
  }
}
BENCHMARK(BM_RenderFrame)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto config = desk_like();
  config.training.batch_size = 4;
  config.data.synthetic = {8, 2};
  const auto dataset = data::synth_generate(config, 0);
  auto train_state = train::init_state(config);
  Rng rng(5);
  for (auto _ : state) {
    const auto batch = train::sample_batch(dataset, rng, config, config.training.batch_size);
    benchmark::DoNotOptimize(train::train_step(train_state, batch));
    if (train_state.finished()) train_state = train::init_state(config);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond)->Iterations(5);

void BM_InversionStep(benchmark::State& state) {
  const render::Generator gen(desk_like(), 6);
  const auto pivot = invedit::compute_pivot(gen, 256, 0);
  Rng rng(7);
  const auto frame = render::render_frame(gen, sample_latent(rng, 64), {sample_latent(rng, 64), sample_latent(rng, 64),
                                                                        sample_latent(rng, 64), sample_latent(rng, 64)},
                                          CameraPose{}, 32, 32);
  const invedit::Target target{32, 32, CameraPose{}, frame.rgb, frame.labels, {}};
  invedit::OptimizeOptions opts;
  opts.steps = 1;
  for (auto _ : state) benchmark::DoNotOptimize(invedit::invert(gen, pivot, target, opts));
}
BENCHMARK(BM_InversionStep)->Unit(benchmark::kMillisecond);

void BM_Fid(benchmark::State& state) {
  std::mt19937_64 g(8);
  const auto dim = state.range(0);
  const metrics::Embeddings a = sfe::testing::random_matrix(g, 1000, dim);
  const metrics::Embeddings b = sfe::testing::random_matrix(g, 1000, dim);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::fid(a, b));
}
BENCHMARK(BM_Fid)->Arg(64)->Arg(192)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
