// Copyright 2026 The icolab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <benchmark/benchmark.h>

#include "icolab/harness.hpp"
#include "icolab/ops.hpp"

using namespace icolab;

namespace {

const ModelWeights<float>& bench_model() {
  static const auto w = init_weights(bench_model_config(), RngStream(1));
  return w;
}

Tensor random_tensor(Shape s, RngStream& rng) {
  std::vector<float> v(static_cast<size_t>(shape_numel(s)));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor::from(std::move(s), std::move(v));
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  RngStream rng(2);
  const auto a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    GradientTape<float> tape;
    benchmark::DoNotOptimize(ops::matmul(tape, a, b));
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 256);

static void BM_ForwardWithContext(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  const auto demos = bench_demonstrations(k, 16, RngStream(3));
  auto tokens = demos.context_tokens();
  for (auto _ : state) benchmark::DoNotOptimize(forward_lm(bench_model(), std::span<const int>(tokens)));
  state.SetComplexityN(k);
}
BENCHMARK(BM_ForwardWithContext)->RangeMultiplier(2)->Range(2, 32)->Complexity();

// One optimizer step on one leave-one-out pair; initialization is excluded
// from the reported time.
static void adapt_step(benchmark::State& state, Method method) {
  const int k = static_cast<int>(state.range(0));
  const auto demos = bench_demonstrations(k, 16, RngStream(4));
  auto cfg = default_adapt_config(method);
  cfg.iterations = 1;
  cfg.ttt_iterations = 1;
  cfg.ttt_batch = 1;
  cfg.batch = 1;
  cfg.p_drop = 0.0;
  for (auto _ : state) {
    const auto res = adapt(bench_model(), demos, cfg);
    state.SetIterationTime(res.step_seconds.back());
  }
  state.SetComplexityN(k);
}

static void BM_CtKvStep(benchmark::State& state) { adapt_step(state, Method::kCtKv); }
static void BM_CtPromptStep(benchmark::State& state) { adapt_step(state, Method::kCtPrompt); }
static void BM_TttStep(benchmark::State& state) { adapt_step(state, Method::kTtt); }
BENCHMARK(BM_CtKvStep)->UseManualTime()->RangeMultiplier(2)->Range(2, 32)->Complexity(benchmark::oN);
BENCHMARK(BM_CtPromptStep)->UseManualTime()->RangeMultiplier(2)->Range(2, 32)->Complexity(benchmark::oNSquared);
BENCHMARK(BM_TttStep)->UseManualTime()->RangeMultiplier(2)->Range(2, 32)->Complexity(benchmark::oNSquared);

static void BM_ScoreOptions(benchmark::State& state) {
  const auto task = gen_task(default_family_config(TaskFamily::kTokenMapping), RngStream(5));
  Conditioning<float> cond;
  cond.literal = task.demos.context_tokens();
  const auto& q = task.queries[0];
  for (auto _ : state) benchmark::DoNotOptimize(score_options(bench_model(), cond, q.x, q.options));
}
BENCHMARK(BM_ScoreOptions);

BENCHMARK_MAIN();
