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
#include <functional>
#include <vector>

#include "icolab/model.hpp"
#include "icolab/tasks.hpp"
#include "icolab/transformer.hpp"

namespace icolab {

struct FamilyWeight {
  TaskFamilyConfig family;
  double weight = 1.0;
};

struct PretrainConfig {
  ModelConfig model;
  std::vector<FamilyWeight> mix;
  int steps = 2000;
  int batch = 8;
  double lr = 2e-3;
  double clip_norm = 1.0;
  int eval_tasks = 16;
  uint64_t seed = 0;
};

struct PretrainReport {
  std::vector<double> losses;  // mean target-token loss per step
  double final_loss = 0.0;
  // Literal in-context accuracy on held-out (eval-pool) rules, per family in mix order.
  std::vector<double> heldout_icl_accuracy;
};

// Training example for one task: [C; x_q; y_q] with targets only on output
// tokens (every y_i of the sequence). targets[i] is the token predicted at
// position i, or -1.
struct LmExample {
  std::vector<int> tokens;
  std::vector<int> targets;
};
LmExample pretrain_example(const TaskInstance& task, int query_index);

// Mixture used when no mix is given: mostly token-mapping, plus the other families.
std::vector<FamilyWeight> default_pretrain_mix();

using PretrainProgress = std::function<void(int step, double loss, double lr)>;

// Trains all weights on tasks drawn from the train rule pool only.
ModelWeights<float> meta_pretrain(const PretrainConfig& config, PretrainReport* report = nullptr,
                                  const PretrainProgress& progress = {});

// Fraction of queries answered correctly by literal in-context conditioning
// over `n_tasks` eval-pool tasks.
double icl_accuracy(const ModelWeights<float>& weights, const TaskFamilyConfig& family, int n_tasks,
                    uint64_t seed);

// Multiple-choice families: the lowest-mean-loss option is the answer.
// Generation families: the greedy decode equals y exactly (STOP included).
bool answer_correct(const ModelWeights<float>& weights, const Conditioning<float>& cond,
                    const TaskInstance& task, int q);

}  // namespace icolab
