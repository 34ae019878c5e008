#include <benchmark/benchmark.h>

#include "gcm/data.hpp"
#include "gcm/harness.hpp"
#include "gcm/localize.hpp"
#include "gcm/model.hpp"
#include "gcm/steer.hpp"

using namespace gcm;

namespace {

// Default toy shape with random weights; timings do not depend on training.
const ModelParams& toy() {
  static const ModelParams p = ModelParams::random_init(ModelConfig{}, 1, 0.05f);
  return p;
}

const TaskDataset& pairs() {
  static const TaskDataset ds = gen_mode_switch(50, 1, Split::kHeldIn);
  return ds;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor2D a(n, n), b(n, n);
  for (std::size_t i = 0; i < n * n; ++i) {
    a.values()[i] = static_cast<float>(i % 7) * 0.1f;
    b.values()[i] = static_cast<float>(i % 5) * 0.1f;
  }
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_Forward(benchmark::State& state) {
  const auto& p = pairs().pairs[0];
  const auto tokens = p.p_orig;
  for (auto _ : state) benchmark::DoNotOptimize(forward_with_cache(toy(), tokens));
}
BENCHMARK(BM_Forward);

void BM_ForwardBackward(benchmark::State& state) {
  const auto& p = pairs().pairs[0];
  std::vector<int> seq = p.p_orig;
  seq.insert(seq.end(), p.r_orig.begin(), p.r_orig.end() - 1);
  RunOptions ro;
  ro.record_tape = true;
  for (auto _ : state) {
    const Trace t = forward_with_cache(toy(), seq, {}, ro);
    Tensor2D d(t.logits.rows(), t.logits.cols());
    d(t.logits.rows() - 1, 0) = 1.0f;
    benchmark::DoNotOptimize(backward(toy(), t, d));
  }
}
BENCHMARK(BM_ForwardBackward);

void BM_GreedyGenerate(benchmark::State& state) {
  const auto& prompt = pairs().pairs[0].p_orig;
  for (auto _ : state) benchmark::DoNotOptimize(generate_unsteered(toy(), prompt));
}
BENCHMARK(BM_GreedyGenerate);

void BM_ActivationPatchPair(benchmark::State& state) {
  const auto& p = pairs().pairs[0];
  for (auto _ : state) {
    for (const HeadId id : all_heads(toy().config())) benchmark::DoNotOptimize(ie_activation_patch(toy(), p, id));
  }
}
BENCHMARK(BM_ActivationPatchPair);

void BM_AttributionPair(benchmark::State& state) {
  const auto& p = pairs().pairs[0];
  for (auto _ : state) benchmark::DoNotOptimize(ie_attribution_all_heads(toy(), p));
}
BENCHMARK(BM_AttributionPair);

void BM_SweepCell(benchmark::State& state) {
  const auto table = rank_random(toy().config(), 0);
  const auto plan = build_diff_means_plan(toy(), pairs(), select_top_k(table, 0.25), 4.0);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_plan(toy(), plan, pairs()));
}
BENCHMARK(BM_SweepCell)->Unit(benchmark::kMillisecond);

void BM_WilcoxonExact(benchmark::State& state) {
  std::vector<double> d;
  for (int i = 1; i <= 12; ++i) d.push_back((i % 3 == 0 ? -1 : 1) * 0.01 * i);
  for (auto _ : state) benchmark::DoNotOptimize(wilcoxon_exact(d));
}
BENCHMARK(BM_WilcoxonExact);

}  // namespace

BENCHMARK_MAIN();
