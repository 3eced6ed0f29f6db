#include <benchmark/benchmark.h>

#include <random>

#include "nrgs/renderer.hpp"

using namespace nrgs;

namespace {

Intrinsics camera(int w, int h) {
  Intrinsics k;
  k.fx = k.fy = 150.0 * w / 160.0;
  k.cx = (w - 1) / 2.0;
  k.cy = (h - 1) / 2.0;
  k.width = w;
  k.height = h;
  return k;
}

std::vector<DeformedGaussian> scene(int n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<DeformedGaussian> prims(n);
  const int side = static_cast<int>(std::sqrt(static_cast<double>(n)));
  for (int i = 0; i < n; ++i) {
    DeformedGaussian& g = prims[i];
    const double x = (i % side) / static_cast<double>(side - 1) - 0.5;
    const double y = (i / side) / static_cast<double>(side - 1) - 0.5;
    g.mean = Vec3(120.0 * x, 120.0 * y, 75.0 + 4.0 * (u(rng) - 0.5));
    g.logScale = Vec3::Constant(std::log(1.6 + 0.4 * u(rng)));
    g.rot = Quat(1.0, 0.1 * u(rng), 0.1 * u(rng), 0.1 * u(rng)).normalized();
    g.opacity = 0.9;
    g.rgb = Vec3(u(rng), u(rng), u(rng));
    g.wd = u(rng);
    g.disp = Vec3::Zero();
  }
  return prims;
}

void BM_RenderForward(benchmark::State& state) {
  const auto K = camera(160, 128);
  const auto prims = scene(static_cast<int>(state.range(0)), 11);
  RenderOptions opts;
  opts.confidence = true;
  opts.workers = static_cast<int>(state.range(1));
  for (auto _ : state) {
    auto out = render(prims, K, Pose::identity(), opts);
    benchmark::DoNotOptimize(out.rgb.data());
  }
}
BENCHMARK(BM_RenderForward)->Args({1296, 1})->Args({1296, 2})->Args({2500, 2})->Unit(benchmark::kMillisecond);

void BM_RenderBackward(benchmark::State& state) {
  const auto K = camera(160, 128);
  const auto prims = scene(static_cast<int>(state.range(0)), 11);
  RenderOptions opts;
  opts.confidence = true;
  opts.workers = static_cast<int>(state.range(1));
  const auto out = render(prims, K, Pose::identity(), opts);
  Image gRgb(K.width, K.height, 3, 0.01), gDepth(K.width, K.height, 1, 0.001);
  ChannelGrads cg;
  cg.rgb = &gRgb;
  cg.depth = &gDepth;
  for (auto _ : state) {
    auto grads = renderBackward(prims, K, Pose::identity(), out, cg, opts.workers);
    benchmark::DoNotOptimize(grads.prim.data());
  }
}
BENCHMARK(BM_RenderBackward)->Args({1296, 1})->Args({1296, 2})->Args({2500, 2})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
