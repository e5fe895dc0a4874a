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

#include "icolab/pretrain.hpp"

#include <cmath>

#include "icolab/errors.hpp"
#include "icolab/optim.hpp"

namespace icolab {

LmExample pretrain_example(const TaskInstance& task, int query_index) {
  const auto& q = task.queries.at(static_cast<size_t>(query_index));
  LmExample ex;
  std::vector<uint8_t> is_y;
  auto push = [&](const std::vector<int>& seg, bool y) {
    ex.tokens.insert(ex.tokens.end(), seg.begin(), seg.end());
    is_y.insert(is_y.end(), seg.size(), y ? 1 : 0);
  };
  for (const auto& p : task.demos.pairs) push(p.x, false), push(p.y, true);
  push(q.x, false);
  push(q.y, true);
  ex.targets.assign(ex.tokens.size(), -1);
  for (size_t i = 0; i + 1 < ex.tokens.size(); ++i)
    if (is_y[i + 1]) ex.targets[i] = ex.tokens[i + 1];
  return ex;
}

std::vector<FamilyWeight> default_pretrain_mix() {
  return {{default_family_config(TaskFamily::kTokenMapping), 0.55},
          {default_family_config(TaskFamily::kModularAffine), 0.15},
          {default_family_config(TaskFamily::kSequenceTransform), 0.15},
          {default_family_config(TaskFamily::kMiniGrid), 0.15}};
}

namespace {

const TaskFamilyConfig& pick_family(const std::vector<FamilyWeight>& mix, RngStream& rng) {
  double total = 0.0;
  for (const auto& f : mix) total += f.weight;
  double u = rng.uniform() * total;
  for (const auto& f : mix) {
    if (u < f.weight) return f.family;
    u -= f.weight;
  }
  return mix.back().family;
}

}  // namespace

ModelWeights<float> meta_pretrain(const PretrainConfig& config, PretrainReport* report,
                                  const PretrainProgress& progress) {
  ICOLAB_REQUIRE(config.steps >= 0 && config.batch > 0, "meta_pretrain: steps must be non-negative and batch positive");
  const auto mix = config.mix.empty() ? default_pretrain_mix() : config.mix;
  RngStream root(config.seed);
  auto weights = init_weights(config.model, root.split("init"));
  weights.set_requires_grad(true);
  std::vector<Tensor> params;
  for (auto& [name, t] : weights.named()) params.push_back(t);
  AdamOptimizer<float> opt(params, CosineSchedule{config.lr, config.steps});
  RngStream data = root.split("data");

  PretrainReport local;
  for (int step = 0; step < config.steps; ++step) {
    RngStream srng = data.split(static_cast<uint64_t>(step));
    GradientTape<float> tape;
    Tensor total;
    int64_t count = 0;
    for (int b = 0; b < config.batch; ++b) {
      const auto& fam = pick_family(mix, srng);
      auto task = gen_task(fam, srng.split(static_cast<uint64_t>(b)), RulePool::kTrain);
      if (rule_pool(task.rule) != RulePool::kTrain)
        throw ConfigError("meta_pretrain: rule " + task.rule.canonical() + " belongs to the evaluation pool");
      const int qi = static_cast<int>(srng.below(task.queries.size()));
      const auto ex = pretrain_example(task, qi);
      ForwardRequest<float> rq;
      rq.tokens = ex.tokens;
      auto logits = forward_lm(tape, weights, rq);
      auto loss = ops::cross_entropy(tape, logits, std::span<const int>(ex.targets), ops::Reduction::kSum);
      for (int t : ex.targets) count += t >= 0;
      total = total.defined() ? ops::add(tape, total, loss) : loss;
    }
    auto mean = ops::scale(tape, total, 1.0f / static_cast<float>(count));
    tape.backward(mean);
    if (config.clip_norm > 0) {
      double sq = 0.0;
      for (const auto& p : params)
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > config.clip_norm) {
        const auto s = static_cast<float>(config.clip_norm / norm);
        for (auto& p : params)
          for (float& g : p.mutable_grad()) g *= s;
      }
    }
    const double lr = opt.current_lr();
    opt.step();
    const double l = mean.item();
    if (!std::isfinite(l)) throw NumericError("meta_pretrain: non-finite loss at step " + std::to_string(step));
    local.losses.push_back(l);
    if (progress) progress(step, l, lr);
  }
  weights.set_requires_grad(false);
  for (auto& p : params) p.drop_grad();
  local.final_loss = local.losses.empty() ? 0.0 : local.losses.back();
  for (const auto& f : mix)
    local.heldout_icl_accuracy.push_back(icl_accuracy(weights, f.family, config.eval_tasks, config.seed + 1));
  if (report) *report = std::move(local);
  return weights;
}

bool answer_correct(const ModelWeights<float>& weights, const Conditioning<float>& cond,
                    const TaskInstance& task, int q) {
  const auto& item = task.queries.at(static_cast<size_t>(q));
  if (task.config.multiple_choice) {
    return score_options(weights, cond, item.x, item.options).chosen == item.answer;
  }
  const auto out = greedy_decode(weights, cond, item.x, static_cast<int>(item.y.size()), Vocabulary::kStop);
  return out == item.y;
}

double icl_accuracy(const ModelWeights<float>& weights, const TaskFamilyConfig& family, int n_tasks,
                    uint64_t seed) {
  RngStream rng = RngStream(seed).split("icl-probe").split(family_name(family.family));
  int correct = 0, total = 0;
  for (int i = 0; i < n_tasks; ++i) {
    const auto task = gen_task(family, rng.split(static_cast<uint64_t>(i)), RulePool::kEval);
    Conditioning<float> cond;
    cond.literal = task.demos.context_tokens();
    for (int q = 0; q < static_cast<int>(task.queries.size()); ++q) {
      correct += answer_correct(weights, cond, task, q);
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / total : 0.0;
}

}  // namespace icolab
