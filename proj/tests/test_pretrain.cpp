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

#include <gtest/gtest.h>

#include "icolab/errors.hpp"
#include "icolab/pretrain.hpp"

using namespace icolab;

namespace {

PretrainConfig tiny_pretrain(int steps) {
  PretrainConfig c;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.max_seq_len = 256;
  c.steps = steps;
  c.batch = 2;
  c.eval_tasks = 2;
  c.seed = 5;
  auto mapping = default_family_config(TaskFamily::kTokenMapping);
  mapping.k = 4;
  c.mix = {{mapping, 1.0}};
  return c;
}

}  // namespace

TEST(Example, TargetsCoverOutputTokensOnly) {
  const auto task = gen_task(default_family_config(TaskFamily::kSequenceTransform), RngStream(3), RulePool::kTrain);
  const auto ex = pretrain_example(task, 0);
  ASSERT_EQ(ex.tokens.size(), ex.targets.size());
  auto expected = task.demos.context_tokens();
  const auto& q = task.queries[0];
  expected.insert(expected.end(), q.x.begin(), q.x.end());
  expected.insert(expected.end(), q.y.begin(), q.y.end());
  EXPECT_EQ(ex.tokens, expected);

  // Every y token of every pair (query included) is predicted from the
  // position before it; nothing else is.
  std::vector<int> want(ex.tokens.size(), -1);
  size_t pos = 0;
  auto mark = [&](const std::vector<int>& x, const std::vector<int>& y) {
    pos += x.size();
    for (size_t j = 0; j < y.size(); ++j) want[pos + j - 1] = y[j];
    pos += y.size();
  };
  for (const auto& p : task.demos.pairs) mark(p.x, p.y);
  mark(q.x, q.y);
  EXPECT_EQ(ex.targets, want);
}

TEST(Pretrain, DeterministicAndTrainsOnTrainPoolOnly) {
  PretrainReport ra, rb;
  const auto a = meta_pretrain(tiny_pretrain(6), &ra);
  const auto b = meta_pretrain(tiny_pretrain(6), &rb);
  EXPECT_EQ(ra.losses, rb.losses);
  const auto na = a.named(), nb = b.named();
  ASSERT_EQ(na.size(), nb.size());
  for (size_t i = 0; i < na.size(); ++i) EXPECT_EQ(na[i].second.values(), nb[i].second.values()) << na[i].first;
  ASSERT_EQ(ra.heldout_icl_accuracy.size(), 1u);
  EXPECT_GE(ra.heldout_icl_accuracy[0], 0.0);
  EXPECT_LE(ra.heldout_icl_accuracy[0], 1.0);
}

TEST(Pretrain, LossDecreasesOnTinyModel) {
  auto c = tiny_pretrain(60);
  c.lr = 3e-3;
  PretrainReport r;
  meta_pretrain(c, &r);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += r.losses[static_cast<size_t>(i)];
    tail += r.losses[r.losses.size() - 1 - static_cast<size_t>(i)];
  }
  EXPECT_LT(tail, head);
}

TEST(Pretrain, UntrainedModelIsNearChance) {
  PretrainReport r;
  const auto w = meta_pretrain(tiny_pretrain(0), &r);
  EXPECT_TRUE(r.losses.empty());
  const auto init = init_weights(tiny_pretrain(0).model, RngStream(5).split("init"));
  EXPECT_EQ(w.named()[0].second.values(), init.named()[0].second.values());
  const auto fam = default_family_config(TaskFamily::kTokenMapping);
  const double acc = icl_accuracy(w, fam, 16, 1);
  EXPECT_NEAR(acc, 1.0 / fam.num_options, 0.15);
}

TEST(Pretrain, InvalidSettings) {
  auto c = tiny_pretrain(2);
  c.batch = 0;
  EXPECT_THROW(meta_pretrain(c), ContractViolation);
  c = tiny_pretrain(3);
  c.lr = 1e30;
  c.clip_norm = 0;
  EXPECT_THROW(meta_pretrain(c), NumericError);
}

TEST(Pretrain, DefaultMixCoversEveryFamily) {
  const auto mix = default_pretrain_mix();
  ASSERT_EQ(mix.size(), 4u);
  EXPECT_EQ(mix[0].family.family, TaskFamily::kTokenMapping);
  double total = 0;
  for (const auto& f : mix) total += f.weight;
  EXPECT_NEAR(total, 1.0, 1e-12);
}
