#include <benchmark/benchmark.h>

#include "pianet/boxes/anchors.hpp"
#include "pianet/nn/ops.hpp"
#include "pianet/rng.hpp"

namespace {

using namespace pianet;

void BM_Conv3d(benchmark::State& state) {
  const std::size_t side = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor5 x(Tensor5::Shape{1, 8, side, side, side});
  for (auto& v : x.vec()) v = rng.uniform();
  nn::ConvParams p = nn::xavier_init({16, 8, 3, 3, 3}, rng);
  for (auto _ : state) {
    auto y = nn::conv3d(x, p, 1, 1);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_Conv3d)->Arg(16)->Arg(32);

void BM_GenerateAnchors(benchmark::State& state) {
  const model::PiaNetConfig cfg;
  for (auto _ : state) {
    auto a = boxes::generate_anchors(cfg);
    benchmark::DoNotOptimize(a.cubes.data());
  }
}
BENCHMARK(BM_GenerateAnchors);

void BM_Nms(benchmark::State& state) {
  Rng rng(2);
  std::vector<Detection> dets;
  for (int i = 0; i < state.range(0); ++i)
    dets.push_back({{rng.uniform(0, 100), rng.uniform(0, 100),
                     rng.uniform(0, 100), rng.uniform(4, 30)},
                    rng.uniform()});
  for (auto _ : state) {
    auto kept = boxes::nms(dets, 0.1);
    benchmark::DoNotOptimize(kept.data());
  }
}
BENCHMARK(BM_Nms)->Arg(200)->Arg(2000);

}  // namespace

BENCHMARK_MAIN();
