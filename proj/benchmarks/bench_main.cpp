#include <benchmark/benchmark.h>

#include "metadet/geometry.hpp"
#include "metadet/tape.hpp"
#include "metadet/util.hpp"

using namespace metadet;

namespace {

Tensor random_map(int h, int w, int c, uint64_t seed) {
  Tensor t({h, w, c});
  Rng rng(seed);
  for (auto& v : t.data) v = float(rng.uniform(-1, 1));
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const int hw = int(state.range(0));
  const int c = int(state.range(1));
  Tensor x = random_map(hw, hw, c, 1);
  Tensor w = random_map(3, 3 * c, c, 2);
  w.shape = {3, 3, c, c};
  Tensor b({c});
  for (auto _ : state) {
    Tape tape(false);
    auto y = tape.conv2d(tape.input(x), tape.input(w), tape.input(b), 1, 1);
    benchmark::DoNotOptimize(tape.val(y).data.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * hw * hw * 9 * c * c * 2);
}
BENCHMARK(BM_Conv3x3)->Args({12, 32})->Args({24, 32})->Args({7, 64});

void BM_Nms(benchmark::State& state) {
  Rng rng(7);
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (int i = 0; i < state.range(0); ++i) {
    double x1 = rng.uniform(0, 90), y1 = rng.uniform(0, 90);
    boxes.push_back(Box{x1, y1, x1 + rng.uniform(4, 30), y1 + rng.uniform(4, 30)});
    scores.push_back(rng.uniform());
  }
  for (auto _ : state) {
    auto kept = nms(boxes, scores, 0.5);
    benchmark::DoNotOptimize(kept.data());
  }
}
BENCHMARK(BM_Nms)->Arg(300)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
