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

#include <cmath>

#include <gtest/gtest.h>

#include "icolab/errors.hpp"
#include "icolab/ico.hpp"
#include "icolab/ops.hpp"

using namespace icolab;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 256;
  return c;
}

// Larger than default init so logits differ by O(1) across tokens.
ModelWeights<float> random_weights(const ModelConfig& c, uint64_t seed) {
  RngStream rng(seed);
  std::vector<std::pair<std::string, Tensor>> named;
  for (const auto& [name, t] : init_weights(c, rng).named()) {
    std::vector<float> v(static_cast<size_t>(t.numel()));
    const bool gain = t.rank() == 1;
    for (auto& x : v) x = static_cast<float>(gain ? 1.0 + 0.2 * rng.normal() : 0.35 * rng.normal());
    named.emplace_back(name, Tensor::from(t.shape(), std::move(v)));
  }
  return weights_from_named<float>(c, named);
}

TaskInstance mapping_task(uint64_t seed, int k = 6) {
  auto c = default_family_config(TaskFamily::kTokenMapping);
  c.k = k;
  c.num_queries = 4;
  return gen_task(c, RngStream(seed));
}

Tensor logits(const ModelWeights<float>& w, const ForwardRequest<float>& rq) {
  GradientTape<float> tape;
  return forward_lm(tape, w, rq).detach();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.at(i)) - b.at(i)));
  return m;
}

std::vector<int> row_argmax(const Tensor& t) {
  std::vector<int> out;
  const auto v = t.values();
  const int64_t cols = t.shape()[1];
  for (int64_t r = 0; r < t.shape()[0]; ++r)
    out.push_back(argmax_row<float>(std::span<const float>(v.data() + r * cols, static_cast<size_t>(cols))));
  return out;
}

// Logits of the query rows after literal context C.
Tensor icl_logits(const ModelWeights<float>& w, const DemonstrationSet& demos, const std::vector<int>& x) {
  auto tokens = demos.context_tokens();
  const auto n = static_cast<int64_t>(tokens.size());
  tokens.insert(tokens.end(), x.begin(), x.end());
  std::vector<int64_t> rows;
  for (int64_t r = n; r < static_cast<int64_t>(tokens.size()); ++r) rows.push_back(r);
  ForwardRequest<float> rq;
  rq.tokens = tokens;
  rq.logit_rows = rows;
  return logits(w, rq);
}

// Prefix with the rows of one pair physically removed; positions are kept.
KVPrefix<float> delete_pair(const KVPrefix<float>& prefix, int pair) {
  std::vector<int64_t> keep;
  for (int64_t j = 0; j < prefix.length(); ++j)
    if (prefix.segment_map[static_cast<size_t>(j)] != pair) keep.push_back(j);
  KVPrefix<float> out;
  GradientTape<float> scratch;
  for (const auto& l : prefix.layers)
    out.layers.push_back({ops::select_rows(scratch, l.keys, keep).detach(),
                          ops::select_rows(scratch, l.values, keep).detach()});
  for (int64_t j : keep) {
    out.segment_map.push_back(prefix.segment_map[static_cast<size_t>(j)]);
    out.positions.push_back(prefix.positions[static_cast<size_t>(j)]);
  }
  out.next_position = prefix.next_position;
  return out;
}

}  // namespace

TEST(Init, CtKvAndCtPromptEqualIcl) {
  const auto w = random_weights(small_config(), 3);
  RngStream rng(30);
  for (int draw = 0; draw < 20; ++draw) {
    const auto task = mapping_task(rng.split(static_cast<uint64_t>(draw)).key());
    const auto& q = task.queries[static_cast<size_t>(draw) % task.queries.size()];
    const auto ref = icl_logits(w, task.demos, q.x);

    const auto kv = init_ct_kv(w, task.demos);
    ForwardRequest<float> a;
    a.tokens = q.x;
    a.prefix = &kv.prefix();
    const auto got_kv = logits(w, a);
    EXPECT_LE(max_abs_diff(got_kv, ref), 1e-5);
    EXPECT_EQ(row_argmax(got_kv), row_argmax(ref));

    const auto pr = init_ct_prompt(w, task.demos);
    ForwardRequest<float> b;
    b.tokens = q.x;
    b.prompt = &pr.prompt();
    const auto got_pr = logits(w, b);
    EXPECT_LE(max_abs_diff(got_pr, ref), 1e-5);
    EXPECT_EQ(row_argmax(got_pr), row_argmax(ref));
  }
}

TEST(Init, ZeroIterationsScoresLikeIcl) {
  const auto w = random_weights(small_config(), 4);
  const auto task = mapping_task(8);
  for (Method m : {Method::kCtKv, Method::kCtPrompt}) {
    auto cfg = default_adapt_config(m);
    cfg.iterations = 0;
    const auto res = adapt(w, task.demos, cfg);
    EXPECT_TRUE(res.losses.empty());
    Conditioning<float> icl;
    icl.literal = task.demos.context_tokens();
    for (const auto& q : task.queries) {
      const auto a = score_options(w, icl, q.x, q.options);
      const auto b = score_options(w, res.inference.conditioning(), q.x, q.options);
      EXPECT_EQ(a.chosen, b.chosen);
      for (size_t o = 0; o < a.mean_nll.size(); ++o) EXPECT_NEAR(a.mean_nll[o], b.mean_nll[o], 1e-5);
    }
  }
}

TEST(Loo, MaskHidesOnePairSegment) {
  const std::vector<int> seg{1, 1, 2, 2, 3, 3, 3};
  const auto mask = loo_mask(seg, 2);
  EXPECT_EQ(mask.context_visible, (std::vector<uint8_t>{1, 1, 0, 0, 1, 1, 1}));
  EXPECT_EQ(mask.visible_count(), 5);
  const std::vector<int> single{1, 1, 1};
  EXPECT_THROW(loo_mask(single, 1), DegenerateConfigError);
}

TEST(Loo, SinglePairContextIsRejected) {
  const auto w = random_weights(small_config(), 5);
  auto task = mapping_task(2);
  task.demos.pairs.resize(1);
  auto cfg = default_adapt_config(Method::kCtKv);
  cfg.iterations = 2;
  EXPECT_THROW(adapt(w, task.demos, cfg), DegenerateConfigError);
  cfg.leave_one_out = false;
  EXPECT_NO_THROW(adapt(w, task.demos, cfg));
}

// Step-0 loss of pair i with leave-one-out masking equals the loss computed
// with pair i's keys and values physically removed.
TEST(Loo, FirstStepLossHasNoLeak) {
  const auto w = random_weights(small_config(), 6);
  const auto task = mapping_task(12);
  auto cfg = default_adapt_config(Method::kCtKv);
  cfg.iterations = 1;
  cfg.p_drop = 0.0;
  const auto res = adapt(w, task.demos, cfg);
  ASSERT_EQ(res.losses.size(), 1u);

  const auto full = capture_kv(w, std::span<const int>(task.demos.context_tokens()), task.demos.segment_map());
  double expected = 0.0;
  for (int i = 0; i < task.demos.k(); ++i) {
    const auto deleted = delete_pair(full, i + 1);
    const auto ex = pair_example(task.demos.pairs[static_cast<size_t>(i)]);
    GradientTape<float> tape;
    ForwardRequest<float> rq;
    rq.tokens = ex.tokens;
    rq.prefix = &deleted;
    rq.logit_rows = ex.rows;
    const auto lg = forward_lm(tape, w, rq);
    expected += ops::cross_entropy(tape, lg, std::span<const int>(ex.targets)).item();
  }
  EXPECT_NEAR(res.losses[0], expected, 1e-5 * std::max(1.0, std::abs(expected)));
}

TEST(Dropout, RatesAndComposition) {
  RngStream rng(1);
  const auto all = AttentionMask::all_visible(2000);
  EXPECT_EQ(token_dropout(all, 0.0, rng).context_visible, all.context_visible);
  EXPECT_THROW(token_dropout(all, 1.0, rng), ContractViolation);
  const auto half = token_dropout(all, 0.5, rng);
  EXPECT_NEAR(static_cast<double>(half.visible_count()) / 2000.0, 0.5, 0.05);
  const std::vector<int> seg{1, 1, 2, 2};
  const auto loo = loo_mask(seg, 1);
  for (int r = 0; r < 20; ++r) {
    const auto d = token_dropout(loo, 0.3, rng);
    EXPECT_FALSE(d.visible(0));
    EXPECT_FALSE(d.visible(1));
  }
}

TEST(Adapt, ModelWeightsAreNotUpdated) {
  const auto w = random_weights(small_config(), 7);
  const auto before = w.named();
  std::vector<std::vector<float>> snapshot;
  for (const auto& [name, t] : before) snapshot.push_back(t.values());
  const auto task = mapping_task(5);
  for (Method m : {Method::kCtKv, Method::kCtPrompt, Method::kPrefixTuning, Method::kTtt}) {
    auto cfg = default_adapt_config(m);
    cfg.iterations = 3;
    cfg.ttt_iterations = 3;
    adapt(w, task.demos, cfg);
  }
  const auto after = w.named();
  for (size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i].second.values(), snapshot[i]) << after[i].first;
}

TEST(Adapt, DeterministicForFixedSeed) {
  const auto w = random_weights(small_config(), 8);
  const auto task = mapping_task(6);
  for (Method m : {Method::kCtKv, Method::kTtt, Method::kTttCtKv, Method::kPromptTuning}) {
    auto cfg = default_adapt_config(m);
    cfg.iterations = 4;
    cfg.ttt_iterations = 4;
    cfg.seed = 17;
    const auto a = adapt(w, task.demos, cfg);
    const auto b = adapt(w, task.demos, cfg);
    EXPECT_EQ(a.losses, b.losses) << method_name(m);
    EXPECT_FALSE(a.losses.empty());
  }
}

TEST(Adapt, OptimizationLowersTheLoss) {
  const auto w = random_weights(small_config(), 9);
  const auto task = mapping_task(10);
  auto cfg = default_adapt_config(Method::kCtKv);
  cfg.iterations = 40;
  cfg.lr = 1e-2;
  cfg.p_drop = 0.0;
  const auto res = adapt(w, task.demos, cfg);
  EXPECT_LT(res.losses.back(), res.losses.front());
}

TEST(Compose, ZeroCtIterationsEqualsTtt) {
  const auto w = random_weights(small_config(), 10);
  const auto task = mapping_task(11);
  auto cfg = default_adapt_config(Method::kTttCtKv);
  cfg.iterations = 0;
  cfg.ttt_iterations = 5;
  cfg.seed = 4;
  const auto both = adapt(w, task.demos, cfg);
  auto tcfg = cfg;
  tcfg.method = Method::kTtt;
  const auto ttt = adapt(w, task.demos, tcfg);
  for (const auto& q : task.queries) {
    const auto a = score_options(w, both.inference.conditioning(), q.x, q.options);
    const auto b = score_options(w, ttt.inference.conditioning(), q.x, q.options);
    EXPECT_EQ(a.chosen, b.chosen);
    for (size_t o = 0; o < a.mean_nll.size(); ++o) EXPECT_NEAR(a.mean_nll[o], b.mean_nll[o], 1e-5);
  }
}

TEST(Params, FormulaMatchesLiveCensusForAllMethods) {
  const auto c = small_config();
  const auto w = random_weights(c, 11);
  const auto task = mapping_task(13);
  ParamCountInputs in;
  in.model = c;
  in.context_len = static_cast<int64_t>(task.demos.context_tokens().size());
  for (Method m : all_methods()) {
    auto cfg = default_adapt_config(m);
    cfg.iterations = m == Method::kIcl ? 0 : 1;
    if (m == Method::kTtt || m == Method::kTttCtKv) cfg.ttt_iterations = 1;
    in.m = cfg.m;
    in.lora_rank = cfg.lora_rank;
    in.init = cfg.init;
    const auto res = adapt(w, task.demos, cfg);
    const auto expected = count_trainable_params(m, in);
    EXPECT_EQ(res.trainable_params, expected) << method_name(m);
    EXPECT_EQ(res.census_params, expected) << method_name(m);
  }
}

TEST(Params, Identities) {
  ParamCountInputs in;
  in.model = small_config();
  in.context_len = 37;
  const int64_t d = in.model.d_model, L = in.model.n_layers;
  EXPECT_EQ(count_trainable_params(Method::kIcl, in), 0);
  EXPECT_EQ(count_trainable_params(Method::kCtKv, in), 2 * L * 37 * d);
  EXPECT_EQ(count_trainable_params(Method::kCtV, in) * 2, count_trainable_params(Method::kCtKv, in));
  auto pt = in;
  pt.m = 37;
  pt.init = InitScheme::kRandomToken;
  EXPECT_EQ(count_trainable_params(Method::kCtPrompt, in), count_trainable_params(Method::kPromptTuning, pt));
  EXPECT_EQ(count_trainable_params(Method::kCtPrompt, in), 37 * d);
  EXPECT_EQ(count_trainable_params(Method::kPrefixTuning, in), 2 * L * in.m * d);
  EXPECT_EQ(count_trainable_params(Method::kTttCtKv, in),
            count_trainable_params(Method::kTtt, in) + count_trainable_params(Method::kCtKv, in));
}

TEST(Fisher, FiniteAndNonNegative) {
  const auto w = random_weights(small_config(), 12);
  const auto task = mapping_task(14);
  const auto prefix = init_ct_kv(w, task.demos).prefix();
  for (bool loo : {false, true}) {
    const auto f = fisher_estimate(w, prefix, task.demos, loo);
    EXPECT_TRUE(std::isfinite(f.f_k) && std::isfinite(f.f_v));
    EXPECT_GE(f.f_k, 0.0);
    EXPECT_GE(f.f_v, 0.0);
    ASSERT_EQ(f.layer_k.size(), 2u);
    // Layers have equal size, so the overall mean is the mean of layer means.
    EXPECT_NEAR(0.5 * (f.layer_k[0] + f.layer_k[1]), f.f_k, 1e-9 * std::max(1.0, f.f_k));
  }
}

TEST(Config, Validation) {
  auto c = default_adapt_config(Method::kCtKv);
  c.p_drop = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_adapt_config(Method::kCtKv);
  c.iterations = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  for (Method m : all_methods()) EXPECT_EQ(method_from_name(method_name(m)), m);
  EXPECT_THROW(method_from_name("ct-kvv"), ConfigError);
}
