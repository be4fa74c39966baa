#include <benchmark/benchmark.h>

#include <vector>

#include "sevdet/classifier/classifier.hpp"
#include "sevdet/finegrain/finegrain.hpp"
#include "sevdet/nn/gemm.hpp"
#include "sevdet/pipeline/pipeline.hpp"
#include "sevdet/vae/vae.hpp"

using namespace sevdet;

static void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> a(n * n, 0.5), b(n * n, 0.25), c(n * n, 0.0);
  for (auto _ : state) {
    nn::gemm_acc(n, n, n, a.data(), b.data(), c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(256);

// Full cascade on one frame. The head biases force every stage to run:
// the gate accepts, the classifier picks Card, and the fine-grain module decides.
static void BM_CascadeFrame(benchmark::State& state) {
  const auto size = static_cast<std::size_t>(state.range(0));
  vae::VaeConfig vc;
  vc.input_size = size;
  classifier::ClassifierConfig cc;
  cc.input_size = size;
  finegrain::FinegrainConfig fc;
  fc.input_size = size;
  const vae::Vae v(vc, 1);
  classifier::Classifier cls(cc, 2);
  const finegrain::FinegrainModel fg(fc, 3);
  auto& head = *cls.all_params().back();
  for (auto& w : head.weights.values()) w = 0.0;
  for (auto& b : head.bias.values()) b = 0.0;
  head.bias[index_of(NineClass::Card)] = 10.0;
  const pipeline::Models models{&v, &cls, &fg};
  pipeline::PipelineConfig cfg;
  cfg.vae_threshold = 1e12;
  const nn::Tensor frame({3, size, size}, 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(pipeline::process_frame(frame, 0, models, cfg));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_CascadeFrame)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_AggregatorPush(benchmark::State& state) {
  std::vector<pipeline::FrameVerdict> verdicts;
  for (std::size_t i = 0; i < 3000; ++i) {
    // Ten-second events every 40 s, scenes in between.
    if (i % 1200 < 300) {
      verdicts.push_back({i, pipeline::EventVerdict{EventKind::Tackle, 0.95, std::nullopt}});
    } else {
      verdicts.push_back({i, pipeline::RejectedScene{NineClass::CenterCircle, 0.99}});
    }
  }
  pipeline::PipelineConfig cfg;
  cfg.vae_threshold = 1.0;
  for (auto _ : state) {
    pipeline::Aggregator agg(cfg);
    for (const auto& v : verdicts) benchmark::DoNotOptimize(agg.push(v));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(verdicts.size()));
}
BENCHMARK(BM_AggregatorPush);

BENCHMARK_MAIN();
