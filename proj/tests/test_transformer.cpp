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
#include "icolab/gradcheck.hpp"
#include "icolab/transformer.hpp"

using namespace icolab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 96;
  return c;
}

// Random weights at a scale where logits vary by O(1), so equality checks
// at 1e-5 are meaningful.
template <class T = float>
ModelWeights<T> random_weights(const ModelConfig& c, uint64_t seed, double sd = 0.35) {
  RngStream rng(seed);
  std::vector<std::pair<std::string, BasicTensor<T>>> named;
  for (const auto& [name, t] : init_weights(c, rng).named()) {
    std::vector<T> v(static_cast<size_t>(t.numel()));
    const bool gain = t.rank() == 1;
    for (auto& x : v) x = static_cast<T>(gain ? 1.0 + 0.2 * rng.normal() : sd * rng.normal());
    named.emplace_back(name, BasicTensor<T>::from(t.shape(), std::move(v)));
  }
  return weights_from_named<T>(c, named);
}

std::vector<int> random_tokens(RngStream& rng, int n, int vocab) {
  std::vector<int> t;
  for (int i = 0; i < n; ++i) t.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(vocab))));
  return t;
}

std::vector<int> segments_for(int n, int k) {
  std::vector<int> s;
  for (int i = 0; i < n; ++i) s.push_back(1 + i * k / n);
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.at(i)) - b.at(i)));
  return m;
}

Tensor logits_of(const ModelWeights<float>& w, ForwardRequest<float> rq) {
  GradientTape<float> tape;
  return forward_lm(tape, w, rq).detach();
}

// Rows [from, from+n) of a [R, V] tensor.
Tensor rows_of(const Tensor& t, int64_t from, int64_t n) {
  const int64_t v = t.dim(1);
  std::vector<float> out(t.data().begin() + from * v, t.data().begin() + (from + n) * v);
  return Tensor::from({n, v}, out);
}

double gelu_ref(double x) {
  return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
}

std::vector<double> rmsnorm_ref(const std::vector<double>& x, const Tensor& g) {
  double ms = 0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] / std::sqrt(ms + 1e-5) * g.at(static_cast<int64_t>(i));
  return y;
}

// y = W x for W stored [out, in].
std::vector<double> matvec(const Tensor& w, const std::vector<double>& x) {
  const int64_t out = w.dim(0), in = w.dim(1);
  std::vector<double> y(static_cast<size_t>(out), 0.0);
  for (int64_t o = 0; o < out; ++o)
    for (int64_t i = 0; i < in; ++i) y[static_cast<size_t>(o)] += w.at(o * in + i) * x[static_cast<size_t>(i)];
  return y;
}

}  // namespace

TEST(Forward, SingleTokenMatchesScalarTranscription) {
  ModelConfig c;
  c.vocab_size = 6;
  c.d_model = 4;
  c.n_layers = 1;
  c.n_heads = 1;
  c.max_seq_len = 8;
  const auto w = random_weights(c, 3, 0.5);
  const int tok = 4;
  const auto& l = w.layers[0];
  std::vector<double> e(4);
  for (int i = 0; i < 4; ++i) e[static_cast<size_t>(i)] = w.tok_emb.at(tok * 4 + i);
  // One token attends only to itself with weight 1; position 0 leaves rotary untouched.
  auto v = matvec(l.wv, rmsnorm_ref(e, l.attn_norm));
  auto o = matvec(l.wo, v);
  std::vector<double> h1(4);
  for (size_t i = 0; i < 4; ++i) h1[i] = e[i] + o[i];
  auto up = matvec(l.w_up, rmsnorm_ref(h1, l.ffn_norm));
  for (auto& u : up) u = gelu_ref(u);
  auto down = matvec(l.w_down, up);
  for (size_t i = 0; i < 4; ++i) h1[i] += down[i];
  auto ref = matvec(w.unembed, rmsnorm_ref(h1, w.final_norm));
  const int toks[1] = {tok};
  auto got = forward_lm(w, std::span<const int>(toks, 1));
  ASSERT_EQ(got.shape(), (Shape{1, 6}));
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(got.at(i), ref[static_cast<size_t>(i)], 1e-5);
}

TEST(CaptureKv, SingleTokenMatchesProjection) {
  ModelConfig c;
  c.vocab_size = 6;
  c.d_model = 4;
  c.n_layers = 1;
  c.n_heads = 1;
  c.max_seq_len = 8;
  const auto w = random_weights(c, 4, 0.5);
  const int tok[1] = {2};
  auto p = capture_kv(w, std::span<const int>(tok, 1), {1});
  std::vector<double> e(4);
  for (int i = 0; i < 4; ++i) e[static_cast<size_t>(i)] = w.tok_emb.at(2 * 4 + i);
  const auto xn = rmsnorm_ref(e, w.layers[0].attn_norm);
  const auto k = matvec(w.layers[0].wk, xn), v = matvec(w.layers[0].wv, xn);
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(p.layers[0].keys.at(i), k[static_cast<size_t>(i)], 1e-5);
    EXPECT_NEAR(p.layers[0].values.at(i), v[static_cast<size_t>(i)], 1e-5);
  }
  EXPECT_EQ(p.positions, (std::vector<int64_t>{0}));
  EXPECT_EQ(p.next_position, 1);
  EXPECT_THROW(capture_kv(w, std::span<const int>(), {}), ContractViolation);
}

TEST(Prefix, CaptureThenQueryEqualsIcl) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 7);
  RngStream rng(70);
  for (int draw = 0; draw < 50; ++draw) {
    const int n = 1 + static_cast<int>(rng.below(30)), q = 1 + static_cast<int>(rng.below(6));
    const auto ctx = random_tokens(rng, n, c.vocab_size);
    const auto query = random_tokens(rng, q, c.vocab_size);
    auto full = ctx;
    full.insert(full.end(), query.begin(), query.end());
    const auto icl = rows_of(forward_lm(w, std::span<const int>(full)), n, q);
    const auto prefix = capture_kv(w, std::span<const int>(ctx), segments_for(n, 3));
    ForwardRequest<float> rq;
    rq.tokens = query;
    rq.prefix = &prefix;
    EXPECT_LE(max_abs_diff(logits_of(w, rq), icl), 1e-5) << "draw " << draw;
  }
}

TEST(Prefix, SoftPromptOfEmbeddingsEqualsIcl) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 8);
  RngStream rng(80);
  for (int draw = 0; draw < 50; ++draw) {
    const int n = 1 + static_cast<int>(rng.below(30)), q = 1 + static_cast<int>(rng.below(6));
    const auto ctx = random_tokens(rng, n, c.vocab_size);
    const auto query = random_tokens(rng, q, c.vocab_size);
    auto full = ctx;
    full.insert(full.end(), query.begin(), query.end());
    const auto icl = rows_of(forward_lm(w, std::span<const int>(full)), n, q);
    SoftPrompt<float> p;
    GradientTape<float> scratch;
    p.rows = ops::embedding(scratch, w.tok_emb, std::span<const int>(ctx)).detach();
    p.segment_map = segments_for(n, 2);
    for (int i = 0; i < n; ++i) p.positions.push_back(i);
    p.next_position = n;
    ForwardRequest<float> rq;
    rq.tokens = query;
    rq.prompt = &p;
    EXPECT_LE(max_abs_diff(logits_of(w, rq), icl), 1e-5) << "draw " << draw;
  }
}

TEST(Mask, MaskingEqualsDeletion) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 9);
  RngStream rng(90);
  for (int draw = 0; draw < 50; ++draw) {
    const int n = 4 + static_cast<int>(rng.below(24));
    const auto ctx = random_tokens(rng, n, c.vocab_size);
    const auto query = random_tokens(rng, 3, c.vocab_size);
    const auto prefix = capture_kv(w, std::span<const int>(ctx), segments_for(n, 4));
    AttentionMask mask = AttentionMask::all_visible(n);
    std::vector<int64_t> keep;
    for (int j = 0; j < n; ++j) {
      if (rng.bernoulli(0.3)) {
        mask.context_visible[static_cast<size_t>(j)] = 0;
      } else {
        keep.push_back(j);
      }
    }
    KVPrefix<float> deleted;
    GradientTape<float> scratch;
    for (const auto& l : prefix.layers)
      deleted.layers.push_back({ops::select_rows(scratch, l.keys, keep).detach(),
                                ops::select_rows(scratch, l.values, keep).detach()});
    for (int64_t j : keep) {
      deleted.segment_map.push_back(prefix.segment_map[static_cast<size_t>(j)]);
      deleted.positions.push_back(j);
    }
    deleted.next_position = prefix.next_position;

    ForwardRequest<float> masked;
    masked.tokens = query;
    masked.prefix = &prefix;
    masked.mask = &mask;
    masked.compact_hidden = false;
    ForwardRequest<float> removed;
    removed.tokens = query;
    removed.prefix = &deleted;
    const auto ref = logits_of(w, removed);
    EXPECT_LE(max_abs_diff(logits_of(w, masked), ref), 1e-5) << "draw " << draw;
    masked.compact_hidden = true;
    EXPECT_LE(max_abs_diff(logits_of(w, masked), ref), 1e-5) << "draw " << draw;
  }
}

TEST(Mask, HidingEverythingEqualsNoContext) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 10);
  RngStream rng(100);
  const auto ctx = random_tokens(rng, 9, c.vocab_size);
  const auto query = random_tokens(rng, 4, c.vocab_size);
  const auto prefix = capture_kv(w, std::span<const int>(ctx), segments_for(9, 3));
  AttentionMask none{std::vector<uint8_t>(9, 0)};
  ForwardRequest<float> a;
  a.tokens = query;
  a.prefix = &prefix;
  a.mask = &none;
  a.compact_hidden = false;
  ForwardRequest<float> b;
  b.tokens = query;
  b.start_position = 9;
  EXPECT_LE(max_abs_diff(logits_of(w, a), logits_of(w, b)), 1e-5);
}

TEST(Mask, SoftPromptMaskingEqualsDeletion) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 11);
  RngStream rng(110);
  const int n = 12;
  SoftPrompt<float> p;
  std::vector<float> rows(static_cast<size_t>(n * c.d_model));
  for (auto& v : rows) v = static_cast<float>(rng.normal());
  p.rows = Tensor::from({n, c.d_model}, rows);
  p.segment_map = segments_for(n, 3);
  for (int i = 0; i < n; ++i) p.positions.push_back(i);
  p.next_position = n;
  const auto query = random_tokens(rng, 3, c.vocab_size);
  AttentionMask mask = AttentionMask::all_visible(n);
  std::vector<int64_t> keep;
  for (int j = 0; j < n; ++j) {
    if (p.segment_map[static_cast<size_t>(j)] == 2) {
      mask.context_visible[static_cast<size_t>(j)] = 0;
    } else {
      keep.push_back(j);
    }
  }
  SoftPrompt<float> deleted;
  GradientTape<float> scratch;
  deleted.rows = ops::select_rows(scratch, p.rows, keep).detach();
  for (int64_t j : keep) {
    deleted.segment_map.push_back(p.segment_map[static_cast<size_t>(j)]);
    deleted.positions.push_back(j);
  }
  deleted.next_position = n;
  ForwardRequest<float> a;
  a.tokens = query;
  a.prompt = &p;
  a.mask = &mask;
  a.compact_hidden = false;
  ForwardRequest<float> b;
  b.tokens = query;
  b.prompt = &deleted;
  EXPECT_LE(max_abs_diff(logits_of(w, a), logits_of(w, b)), 1e-5);
}

TEST(Forward, Causality) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 12);
  RngStream rng(120);
  auto toks = random_tokens(rng, 10, c.vocab_size);
  const auto base = forward_lm(w, std::span<const int>(toks));
  for (int t = 0; t < 9; ++t) {
    auto pert = toks;
    pert[static_cast<size_t>(t + 1)] = (pert[static_cast<size_t>(t + 1)] + 1) % c.vocab_size;
    const auto got = forward_lm(w, std::span<const int>(pert));
    EXPECT_EQ(max_abs_diff(rows_of(got, 0, t + 1), rows_of(base, 0, t + 1)), 0.0);
  }
}

TEST(Forward, ContractErrors) {
  auto c = tiny_config();
  c.max_seq_len = 8;
  const auto w = random_weights(c, 13);
  std::vector<int> long_seq(9, 1);
  EXPECT_THROW(forward_lm(w, std::span<const int>(long_seq)), ContractViolation);
  const std::vector<int> bad{1, 99};
  EXPECT_THROW(forward_lm(w, std::span<const int>(bad)), ContractViolation);
  const std::vector<int> ctx{1, 2, 3};
  const auto prefix = capture_kv(w, std::span<const int>(ctx), {1, 1, 2});
  AttentionMask wrong = AttentionMask::all_visible(2);
  ForwardRequest<float> rq;
  const std::vector<int> q{4};
  rq.tokens = q;
  rq.prefix = &prefix;
  rq.mask = &wrong;
  EXPECT_THROW(logits_of(w, rq), ContractViolation);
  ModelConfig odd = tiny_config();
  odd.d_model = 9;
  EXPECT_THROW(odd.validate(), ConfigError);
}

TEST(Lora, ZeroBIsIdentity) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 14);
  const auto targets = default_lora_targets();
  const auto lora = make_lora(c, 2, targets, 1.0, RngStream(1));
  RngStream rng(140);
  const auto toks = random_tokens(rng, 7, c.vocab_size);
  ForwardRequest<float> a, b;
  a.tokens = b.tokens = toks;
  b.lora = &lora;
  EXPECT_EQ(max_abs_diff(logits_of(w, a), logits_of(w, b)), 0.0);
}

TEST(Lora, RankDoublesCountAndRankBound) {
  const auto c = tiny_config();
  const auto targets = default_lora_targets();
  const auto r1 = make_lora(c, 1, targets, 1.0, RngStream(1)).trainable_count();
  const auto r2 = make_lora(c, 2, targets, 1.0, RngStream(1)).trainable_count();
  EXPECT_EQ(r2, 2 * r1);
  int64_t expect = 0;
  for (auto t : targets) {
    const auto [din, dout] = lora_dims(c, t);
    expect += din + dout;
  }
  EXPECT_EQ(r1, expect * c.n_layers);
  EXPECT_THROW(make_lora(c, 8, targets, 1.0, RngStream(1)), ContractViolation);
  EXPECT_THROW(make_lora(c, 0, targets, 1.0, RngStream(1)), ContractViolation);
}

TEST(GradCheck, WholeModelWithPrefixAndLora) {
  auto c = tiny_config();
  c.n_layers = 2;
  const auto w64 = random_weights<double>(c, 15, 0.3);
  const auto targets = default_lora_targets();
  auto lora = make_lora(c, 2, targets, 1.0, RngStream(2));
  RngStream rng(150);
  // Non-zero B so gradients reach A.
  for (auto& ad : lora.adapters)
    for (auto& v : ad.b.data()) v = static_cast<float>(0.2 * rng.normal());
  const auto ctx = random_tokens(rng, 6, c.vocab_size);
  const auto query = random_tokens(rng, 4, c.vocab_size);
  const auto prefix = capture_kv(w64, std::span<const int>(ctx), segments_for(6, 2));

  std::vector<Tensor64> point;
  for (const auto& [name, t] : w64.named()) point.push_back(t.clone());
  for (const auto& t : prefix.tensors()) point.push_back(t.clone());
  for (const auto& t : lora.params()) point.push_back(t.cast<double>());
  const size_t n_weights = w64.named().size();
  const size_t n_prefix = prefix.tensors().size();

  auto f = [&](GradientTape<double>& tape, const std::vector<Tensor64>& p) {
    std::vector<std::pair<std::string, Tensor64>> named;
    const auto names = w64.named();
    for (size_t i = 0; i < n_weights; ++i) named.emplace_back(names[i].first, p[i]);
    const auto w = weights_from_named<double>(c, named);
    KVPrefix<double> pre = prefix;
    for (size_t l = 0; l < pre.layers.size(); ++l)
      pre.layers[l] = {p[n_weights + 2 * l], p[n_weights + 2 * l + 1]};
    LoraSet<double> ls;
    for (size_t a = 0; a < lora.adapters.size(); ++a) {
      const auto& src = lora.adapters[a];
      ls.adapters.push_back({src.layer, src.target, p[n_weights + n_prefix + 2 * a],
                             p[n_weights + n_prefix + 2 * a + 1], 1.0});
    }
    AttentionMask mask = AttentionMask::all_visible(6);
    mask.context_visible[2] = 0;
    ForwardRequest<double> rq;
    rq.tokens = query;
    rq.prefix = &pre;
    rq.mask = &mask;
    rq.lora = &ls;
    const std::vector<int> tg{3, -1, 5, 1};
    return ops::cross_entropy(tape, forward_lm(tape, w, rq), std::span<const int>(tg));
  };
  // Deep composition: third derivatives are large enough that h = 1e-3
  // truncation alone reaches ~3e-3 on small coordinates; the error falls as h^2.
  const auto rep = finite_diff_check(f, point, 1e-5);
  EXPECT_LT(rep.max_relative_error, 1e-4)
      << "param " << rep.worst_param << " idx " << rep.worst_index << " a=" << rep.analytic_at_worst
      << " n=" << rep.numeric_at_worst;
}

TEST(GradCheck, SoftPromptPath) {
  const auto c = tiny_config();
  const auto w = random_weights<double>(c, 16, 0.3);
  RngStream rng(160);
  const auto query = random_tokens(rng, 3, c.vocab_size);
  std::vector<double> rows(static_cast<size_t>(5 * c.d_model));
  for (auto& v : rows) v = rng.normal();
  auto f = [&](GradientTape<double>& tape, const std::vector<Tensor64>& p) {
    SoftPrompt<double> sp;
    sp.rows = p[0];
    sp.segment_map = {1, 1, 2, 2, 3};
    sp.positions = {0, 1, 2, 3, 4};
    sp.next_position = 5;
    AttentionMask mask = AttentionMask::all_visible(5);
    mask.context_visible[1] = 0;
    ForwardRequest<double> rq;
    rq.tokens = query;
    rq.prompt = &sp;
    rq.mask = &mask;
    rq.compact_hidden = false;
    const std::vector<int> tg{1, 2, 3};
    return ops::cross_entropy(tape, forward_lm(tape, w, rq), std::span<const int>(tg));
  };
  const auto rep = finite_diff_check(f, {Tensor64::from({5, c.d_model}, rows)});
  EXPECT_LT(rep.max_relative_error, 1e-4);
}

TEST(Decode, ImmediateStopAndTieRule) {
  auto c = tiny_config();
  auto w = random_weights(c, 17);
  // Constant hidden state: identical embeddings and zero residual branches.
  for (int64_t i = 0; i < w.tok_emb.numel(); ++i) w.tok_emb.data()[static_cast<size_t>(i)] = (i % c.d_model) == 0 ? 1.f : 0.f;
  for (auto& l : w.layers) {
    for (auto* t : {&l.wo, &l.w_down})
      for (auto& v : t->data()) v = 0.f;
  }
  for (auto& v : w.unembed.data()) v = 0.f;
  const int stop = 5;
  w.unembed.data()[static_cast<size_t>(stop * c.d_model)] = 1.f;
  Conditioning<float> cond;
  const std::vector<int> q{1, 2};
  EXPECT_EQ(greedy_decode(w, cond, std::span<const int>(q), 10, stop), (std::vector<int>{stop}));
  // All logits equal: the lowest id wins.
  for (auto& v : w.unembed.data()) v = 0.f;
  EXPECT_EQ(greedy_decode(w, cond, std::span<const int>(q), 3, stop), (std::vector<int>{0, 0, 0}));
  EXPECT_THROW(greedy_decode(w, cond, std::span<const int>(q), 0, stop), ContractViolation);
  const std::vector<float> tie{1.f, 3.f, 3.f};
  EXPECT_EQ(argmax_row<float>(tie), 1);
}

TEST(Decode, CachedDecodingMatchesFullRecompute) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 18);
  RngStream rng(180);
  const auto ctx = random_tokens(rng, 8, c.vocab_size);
  const auto query = random_tokens(rng, 2, c.vocab_size);
  const auto prefix = capture_kv(w, std::span<const int>(ctx), segments_for(8, 2));
  for (int mode = 0; mode < 2; ++mode) {
    Conditioning<float> cond;
    if (mode == 0) cond.literal = ctx;
    else cond.prefix = &prefix;
    const auto out = greedy_decode(w, cond, std::span<const int>(query), 6, -1);
    ASSERT_EQ(out.size(), 6u);
    auto seq = ctx;
    seq.insert(seq.end(), query.begin(), query.end());
    for (int t : out) {
      const auto logits = forward_lm(w, std::span<const int>(seq));
      const auto last = rows_of(logits, logits.dim(0) - 1, 1);
      EXPECT_EQ(argmax_row<float>(last.data()), t);
      seq.push_back(t);
    }
  }
}

TEST(Score, MatchesFullForwardAndTieRule) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 19);
  RngStream rng(190);
  const auto ctx = random_tokens(rng, 6, c.vocab_size);
  const auto query = random_tokens(rng, 2, c.vocab_size);
  const std::vector<std::vector<int>> opts{{3, 4}, {5}, {3, 4}};
  Conditioning<float> cond;
  cond.literal = ctx;
  const auto s = score_options(w, cond, std::span<const int>(query), opts);
  for (size_t o = 0; o < opts.size(); ++o) {
    auto seq = ctx;
    seq.insert(seq.end(), query.begin(), query.end());
    const auto n0 = static_cast<int64_t>(seq.size());
    seq.insert(seq.end(), opts[o].begin(), opts[o].end());
    const auto logits = forward_lm(w, std::span<const int>(seq));
    std::vector<int> tg(seq.size(), -1);
    for (size_t j = 0; j < opts[o].size(); ++j) tg[static_cast<size_t>(n0 - 1) + j] = opts[o][j];
    double total = 0;
    for (double v : ops::row_nll(logits, std::span<const int>(tg))) total += v;
    EXPECT_NEAR(s.sum_nll[o], total, 1e-4);
    EXPECT_NEAR(s.mean_nll[o], total / static_cast<double>(opts[o].size()), 1e-4);
  }
  EXPECT_EQ(s.mean_nll[0], s.mean_nll[2]);
  EXPECT_NE(s.chosen, 2);
  const std::vector<std::vector<int>> same{{7}, {7}};
  EXPECT_EQ(score_options(w, cond, std::span<const int>(query), same).chosen, 0);
  EXPECT_THROW(score_options(w, cond, std::span<const int>(query), {{1}}), ContractViolation);
  EXPECT_THROW(score_options(w, cond, std::span<const int>(query), {{1}, {}}), ContractViolation);
}
