#include <benchmark/benchmark.h>

#include "sevdet/nn/ops.hpp"

using namespace sevdet;
using namespace sevdet::nn;

static void BM_Conv2d(benchmark::State& state) {
  const auto cin = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  auto p = LayerParams::conv(cin, 2 * cin, 3);
  p.init_he_uniform(rng);
  Tensor x({16, cin, hw, hw}, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p, 1, Padding::Same));
  state.SetItemsProcessed(state.iterations() * 16 * static_cast<long>(2 * cin * cin * 9 * hw * hw));
}
BENCHMARK(BM_Conv2d)->Args({16, 16})->Args({32, 8})->Args({64, 4});
