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

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icolab/ico.hpp"
#include "icolab/model.hpp"
#include "icolab/tasks.hpp"

namespace icolab {

// A task whose rule and queries are fixed; each seed draws a fresh set of
// demonstration pairs.
struct TaskSpec {
  TaskFamilyConfig config;
  RngStream rng;
  RulePool pool = RulePool::kEval;

  TaskInstance instantiate(uint64_t demo_seed) const;
};

// `count` held-out tasks of one family derived from `seed`.
std::vector<TaskSpec> make_task_suite(const TaskFamilyConfig& config, int count, uint64_t seed,
                                      RulePool pool = RulePool::kEval);

struct EvalRecord {
  uint64_t task_id = 0;
  TaskFamily family = TaskFamily::kTokenMapping;
  Method method = Method::kIcl;
  uint64_t seed = 0;
  double accuracy = 0.0;
  std::vector<uint8_t> correct;
  double train_seconds = 0.0;
  int iterations = 0;
  double lr = 0.0;
  int64_t trainable_params = 0;
  // Set when adaptation or scoring failed; the record then carries no accuracy.
  std::optional<std::string> error;

  bool ok() const { return !error.has_value(); }
  bool solved() const;
};

struct AccuracySummary {
  std::string label;
  TaskFamily family = TaskFamily::kTokenMapping;
  int tasks = 0;
  int seeds = 0;
  int failures = 0;
  // Mean over tasks per seed, then mean and sample sd over seeds.
  double mean = 0.0;
  double sd = 0.0;
  std::vector<double> per_seed;
  double mean_train_seconds = 0.0;
};

// Adapt on every (task, seed) pair and score every query: greedy exact match
// for generation families, lowest-loss option for multiple-choice ones.
std::vector<EvalRecord> evaluate_method(const ModelWeights<float>& model, const std::vector<TaskSpec>& tasks,
                                        const AdaptConfig& config, const std::vector<uint64_t>& seeds);

AccuracySummary summarize(const std::vector<EvalRecord>& records, const std::string& label = "");

struct ConfusionMatrix {
  int64_t both = 0;    // A solved, B solved
  int64_t a_only = 0;  // A solved, B unsolved
  int64_t b_only = 0;  // A unsolved, B solved
  int64_t neither = 0;
  int64_t total() const { return both + a_only + b_only + neither; }
};

// Task-level comparison; a (task, seed) unit counts as solved when every
// query is correct. Throws ContractViolation when the universes differ.
ConfusionMatrix confusion_matrix(const std::vector<EvalRecord>& a, const std::vector<EvalRecord>& b);

struct RetrievalReport {
  std::vector<AccuracySummary> families;
};

// Queries the ICL model with each demonstration input; the answer is
// literally present in the context.
RetrievalReport retrieval_diagnostic(const ModelWeights<float>& model, const std::vector<TaskSpec>& tasks,
                                     const std::vector<uint64_t>& seeds);

struct AblationRow {
  std::string name;  // neither, no-loo, no-dropout, both
  bool leave_one_out = false;
  double p_drop = 0.0;
  std::vector<AccuracySummary> families;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  // Families with k <= 4 where dropping leave-one-out beats using both.
  std::vector<TaskFamily> loo_reversal;
};

AblationReport ablation_suite(const ModelWeights<float>& model, const std::vector<TaskSpec>& tasks,
                              const std::vector<uint64_t>& seeds, const AdaptConfig& base, double p_drop = 0.05);

struct BenchConfig {
  std::vector<int> k_grid{2, 4, 8, 16, 32};
  int ell = 16;
  std::vector<Method> methods{Method::kCtKv, Method::kCtPrompt, Method::kTtt};
  bool leave_one_out = true;
  int warmup = 5;
  int repeats = 5;
  // Smallest wall time of one timed group; groups grow until they reach it.
  double min_group_seconds = 2e-2;
  uint64_t seed = 0;
};

// Model shape used for timing: narrow residual stream, many heads, so
// attention dominates the step.
ModelConfig bench_model_config();

struct BenchRecord {
  Method method = Method::kCtKv;
  int k = 0;
  int ell = 0;
  double step_seconds = 0.0;  // median over repeats
  std::vector<double> repeats;
  int steps_per_group = 1;
  int64_t per_head = 0;       // Tq * Tk for one pair
  int64_t expected_per_head = 0;
  int64_t per_step = 0;       // summed over layers and heads
  bool counters_match = false;
};

struct ExponentFit {
  Method method = Method::kCtKv;
  double slope = 0.0;
  double intercept = 0.0;
};

struct BenchReport {
  std::vector<BenchRecord> records;
  std::vector<ExponentFit> fits;
};

// Per-head query x key products for one training pair.
int64_t expected_attention_per_head(Method method, int k, int ell);

// Pairs of exactly `ell` tokens drawn from the input/output symbol ranges.
DemonstrationSet bench_demonstrations(int k, int ell, RngStream rng);

// Runs one lane only; throws ContractViolation if another bench is active.
BenchReport complexity_bench(const ModelWeights<float>& model, const BenchConfig& config);

// Least-squares slope of log(y) against log(x).
ExponentFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

// Wall-clock fields go under a "timing" key and are left out unless asked
// for, so record files compare byte for byte across reruns.
std::string eval_record_json(const EvalRecord& r, bool with_timing = false);
std::string summary_json(const AccuracySummary& s, bool with_timing = false);
std::string confusion_json(const ConfusionMatrix& c, const std::string& a, const std::string& b);
std::string retrieval_json(const RetrievalReport& r);
std::string ablation_json(const AblationReport& r);
std::string bench_json(const BenchReport& r, bool with_timing = false);

std::string summaries_csv(const std::vector<AccuracySummary>& rows);
std::string bench_csv(const BenchReport& r);

}  // namespace icolab
