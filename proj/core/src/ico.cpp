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

#include "icolab/ico.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "icolab/errors.hpp"
#include "icolab/optim.hpp"

namespace icolab {

const char* method_name(Method m) {
  switch (m) {
    case Method::kIcl: return "icl";
    case Method::kPromptTuning: return "prompt-tuning";
    case Method::kPrefixTuning: return "prefix-tuning";
    case Method::kCtPrompt: return "ct-prompt";
    case Method::kCtKv: return "ct-kv";
    case Method::kCtV: return "ct-v";
    case Method::kCtPrefix: return "ct-prefix";
    case Method::kTtt: return "ttt";
    case Method::kTttCtKv: return "ttt+ct-kv";
  }
  return "?";
}

std::vector<Method> all_methods() {
  return {Method::kIcl,  Method::kPromptTuning, Method::kPrefixTuning,
          Method::kCtPrompt, Method::kCtKv,     Method::kCtV,
          Method::kCtPrefix, Method::kTtt,      Method::kTttCtKv};
}

Method method_from_name(const std::string& name) {
  for (auto m : all_methods())
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method '" + name + "'");
}

const char* init_scheme_name(InitScheme s) {
  switch (s) {
    case InitScheme::kDemoTokens: return "demo-tokens";
    case InitScheme::kRandomToken: return "random-token";
    case InitScheme::kUniform: return "uniform";
    case InitScheme::kMlp: return "mlp";
  }
  return "?";
}

InitScheme init_scheme_from_name(const std::string& name) {
  for (auto s : {InitScheme::kDemoTokens, InitScheme::kRandomToken, InitScheme::kUniform, InitScheme::kMlp})
    if (name == init_scheme_name(s)) return s;
  throw ConfigError("unknown init scheme '" + name + "'");
}

void AdaptConfig::validate() const {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw ConfigError("p_drop must be in [0, 1)");
  if (iterations < 0 || ttt_iterations < 0) throw ConfigError("iterations must be non-negative");
  if (iterations > 0 && !(lr > 0.0)) throw ConfigError("lr must be positive when iterations > 0");
  if (ttt_iterations > 0 && !(ttt_lr > 0.0))
    throw ConfigError("ttt_lr must be positive when ttt_iterations > 0");
  if (m <= 0) throw ConfigError("m must be positive");
  if (batch < 0) throw ConfigError("batch must be non-negative");
  if (ttt_batch < 0) throw ConfigError("ttt_batch must be non-negative");
  if (lora_rank < 1) throw ConfigError("lora_rank must be at least 1");
  if (init == InitScheme::kMlp && method != Method::kPrefixTuning)
    throw ConfigError("the mlp init scheme applies to prefix-tuning only");
}

AdaptConfig default_adapt_config(Method method) {
  AdaptConfig c;
  c.method = method;
  switch (method) {
    case Method::kIcl:
      c.iterations = 0;
      c.ttt_iterations = 0;
      break;
    case Method::kPromptTuning:
    case Method::kPrefixTuning:
      c.lr = 3e-3;
      c.leave_one_out = false;
      break;
    case Method::kCtPrompt:
    case Method::kCtKv:
    case Method::kCtV:
    case Method::kCtPrefix:
      c.lr = 1e-3;
      c.p_drop = 0.05;
      break;
    case Method::kTtt:
      c.iterations = 0;
      break;
    case Method::kTttCtKv:
      c.lr = 3e-4;
      c.iterations = 25;
      c.p_drop = 0.05;
      break;
  }
  return c;
}

std::vector<Tensor> PrefixMlp::params() const {
  std::vector<Tensor> out{seed, w1};
  for (size_t i = 0; i < w_keys.size(); ++i) {
    out.push_back(w_keys[i]);
    out.push_back(w_values[i]);
  }
  return out;
}

std::vector<Tensor> ContextRepresentation::trainable() const {
  if (mlp) return mlp->params();
  std::vector<Tensor> src;
  if (is_prompt()) {
    src.push_back(prompt().rows);
  } else {
    src = prefix().tensors();
  }
  std::vector<Tensor> out;
  for (auto& t : src)
    if (t.requires_grad()) out.push_back(t);
  return out;
}

int64_t ContextRepresentation::length() const {
  const int64_t own = is_prompt() ? prompt().length() : prefix().length();
  return own + (frozen_base ? frozen_base->length() : 0);
}

std::vector<int> ContextRepresentation::segment_map() const {
  std::vector<int> out;
  if (frozen_base) out = frozen_base->segment_map;
  const auto& own = is_prompt() ? prompt().segment_map : prefix().segment_map;
  out.insert(out.end(), own.begin(), own.end());
  return out;
}

ContextRepresentation ContextRepresentation::clone() const {
  ContextRepresentation out;
  if (is_prompt()) {
    out.value = prompt().clone();
  } else {
    out.value = prefix().clone();
  }
  if (frozen_base) out.frozen_base = frozen_base->clone();
  if (mlp) {
    PrefixMlp c;
    c.seed = mlp->seed.clone();
    c.w1 = mlp->w1.clone();
    for (const auto& t : mlp->w_keys) c.w_keys.push_back(t.clone());
    for (const auto& t : mlp->w_values) c.w_values.push_back(t.clone());
    out.mlp = std::move(c);
  }
  return out;
}

KVPrefix<float> realize_prefix(GradientTape<float>& tape, const ModelConfig& cfg,
                               const ContextRepresentation& ctx) {
  ICOLAB_REQUIRE(!ctx.is_prompt(), "realize_prefix: context is a soft prompt");
  KVPrefix<float> own = ctx.prefix();
  if (ctx.mlp) {
    const auto& mlp = *ctx.mlp;
    auto hidden = ops::tanh(tape, ops::matmul(tape, mlp.seed, mlp.w1, true));
    for (int l = 0; l < cfg.n_layers; ++l) {
      auto k = ops::matmul(tape, hidden, mlp.w_keys[static_cast<size_t>(l)], true);
      auto v = ops::matmul(tape, hidden, mlp.w_values[static_cast<size_t>(l)], true);
      own.layers[static_cast<size_t>(l)] = {ops::split_heads(tape, k, cfg.n_heads),
                                            ops::split_heads(tape, v, cfg.n_heads)};
    }
  }
  if (ctx.frozen_base) return concat_prefix(tape, *ctx.frozen_base, own);
  return own;
}

Conditioning<float> InferenceContext::conditioning() const {
  Conditioning<float> c;
  c.literal = literal;
  c.prompt = prompt ? &*prompt : nullptr;
  c.prefix = prefix ? &*prefix : nullptr;
  c.lora = lora ? &*lora : nullptr;
  return c;
}

namespace {

void require_fits(const ModelConfig& cfg, int64_t len) {
  if (len > cfg.max_seq_len)
    throw ContractViolation("context of " + std::to_string(len) + " tokens exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
}

std::vector<int64_t> iota_positions(int64_t from, int64_t n) {
  std::vector<int64_t> p(static_cast<size_t>(n));
  std::iota(p.begin(), p.end(), from);
  return p;
}

Tensor uniform_tensor(Shape s, RngStream& rng, double lo, double hi, bool grad) {
  std::vector<float> v(static_cast<size_t>(shape_numel(s)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::from(std::move(s), std::move(v), grad);
}

}  // namespace

ContextRepresentation init_ct_prompt(const ModelWeights<float>& model, const DemonstrationSet& demos) {
  ICOLAB_REQUIRE(demos.k() >= 1, "init_ct_prompt: no demonstrations");
  demos.validate();
  const auto tokens = demos.context_tokens();
  require_fits(model.config, static_cast<int64_t>(tokens.size()));
  GradientTape<float> scratch;
  SoftPrompt<float> p;
  p.rows = ops::embedding(scratch, model.tok_emb, tokens).detach();
  p.rows.set_requires_grad(true);
  p.segment_map = demos.segment_map();
  p.positions = iota_positions(0, p.length());
  p.next_position = p.length();
  return ContextRepresentation{p, std::nullopt, std::nullopt};
}

ContextRepresentation init_ct_kv(const ModelWeights<float>& model, const DemonstrationSet& demos,
                                 const LoraSet<float>* lora) {
  ICOLAB_REQUIRE(demos.k() >= 1, "init_ct_kv: no demonstrations");
  demos.validate();
  const auto tokens = demos.context_tokens();
  require_fits(model.config, static_cast<int64_t>(tokens.size()));
  auto prefix = capture_kv(model, std::span<const int>(tokens), demos.segment_map(), lora);
  for (auto& t : prefix.tensors()) t.set_requires_grad(true);
  return ContextRepresentation{prefix, std::nullopt, std::nullopt};
}

ContextRepresentation init_baseline(const ModelWeights<float>& model, InitScheme scheme, int m,
                                    bool as_prefix, RngStream rng) {
  ICOLAB_REQUIRE(m > 0, "init_baseline: m must be positive");
  ICOLAB_REQUIRE(scheme != InitScheme::kDemoTokens, "init_baseline: demo-token init is Context Tuning");
  ICOLAB_REQUIRE(as_prefix || scheme != InitScheme::kMlp, "init_baseline: mlp applies to prefixes only");
  const auto& cfg = model.config;
  require_fits(cfg, m);
  const int64_t d = cfg.d_model;
  const std::vector<int> zeros(static_cast<size_t>(m), 0);
  std::vector<int> random_tokens;
  if (scheme == InitScheme::kRandomToken) {
    for (int i = 0; i < m; ++i) random_tokens.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab_size))));
  }
  if (!as_prefix) {
    SoftPrompt<float> p;
    if (scheme == InitScheme::kRandomToken) {
      GradientTape<float> scratch;
      p.rows = ops::embedding(scratch, model.tok_emb, random_tokens).detach();
      p.rows.set_requires_grad(true);
    } else {
      p.rows = uniform_tensor({m, d}, rng, -0.5, 0.5, true);
    }
    p.segment_map = zeros;
    p.positions = iota_positions(0, m);
    p.next_position = m;
    return ContextRepresentation{p, std::nullopt, std::nullopt};
  }
  KVPrefix<float> prefix;
  prefix.segment_map = zeros;
  prefix.positions = iota_positions(0, m);
  prefix.next_position = m;
  const Shape s{cfg.n_heads, m, cfg.d_head()};
  ContextRepresentation out;
  switch (scheme) {
    case InitScheme::kRandomToken:
      prefix = capture_kv(model, std::span<const int>(random_tokens), zeros);
      for (auto& t : prefix.tensors()) t.set_requires_grad(true);
      break;
    case InitScheme::kUniform:
      for (int l = 0; l < cfg.n_layers; ++l)
        prefix.layers.push_back({uniform_tensor(s, rng, -0.5, 0.5, true), uniform_tensor(s, rng, -0.5, 0.5, true)});
      break;
    case InitScheme::kMlp: {
      PrefixMlp mlp;
      const int64_t hdim = PrefixMlp::kHidden;
      mlp.seed = uniform_tensor({m, d}, rng, -0.5, 0.5, true);
      const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
      const double b2 = 1.0 / std::sqrt(static_cast<double>(hdim));
      mlp.w1 = uniform_tensor({hdim, d}, rng, -b1, b1, true);
      for (int l = 0; l < cfg.n_layers; ++l) {
        mlp.w_keys.push_back(uniform_tensor({d, hdim}, rng, -b2, b2, true));
        mlp.w_values.push_back(uniform_tensor({d, hdim}, rng, -b2, b2, true));
        prefix.layers.push_back({Tensor::zeros(s), Tensor::zeros(s)});
      }
      out.mlp = std::move(mlp);
      break;
    }
    case InitScheme::kDemoTokens: break;
  }
  out.value = std::move(prefix);
  return out;
}

ContextRepresentation make_ct_v(const KVPrefix<float>& prefix) {
  KVPrefix<float> p = prefix.clone();
  for (auto& l : p.layers) {
    l.keys.set_requires_grad(false);
    l.values.set_requires_grad(true);
  }
  return ContextRepresentation{p, std::nullopt, std::nullopt};
}

ContextRepresentation make_ct_prefix(const KVPrefix<float>& prefix, int m, RngStream rng, double noise_sd) {
  ICOLAB_REQUIRE(m >= 1, "make_ct_prefix: m must be at least 1");
  ICOLAB_REQUIRE(prefix.length() >= 1, "make_ct_prefix: empty source prefix");
  KVPrefix<float> base = prefix.clone();
  for (auto& t : base.tensors()) t.set_requires_grad(false);
  KVPrefix<float> fresh;
  const int64_t n = prefix.length();
  auto mean_rows = [&](const Tensor& t) {
    // t: [H, n, Dh] -> [H, m, Dh] with every row the token mean plus noise.
    const int64_t h = t.dim(0), dh = t.dim(2);
    std::vector<float> out(static_cast<size_t>(h * m * dh));
    const auto src = t.data();
    for (int64_t a = 0; a < h; ++a)
      for (int64_t c = 0; c < dh; ++c) {
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) s += src[static_cast<size_t>((a * n + j) * dh + c)];
        const double mean = s / static_cast<double>(n);
        for (int64_t j = 0; j < m; ++j)
          out[static_cast<size_t>((a * m + j) * dh + c)] = static_cast<float>(mean + noise_sd * rng.normal());
      }
    return Tensor::from({h, m, dh}, std::move(out), true);
  };
  for (const auto& l : prefix.layers) {
    auto k = mean_rows(l.keys);
    auto v = mean_rows(l.values);
    fresh.layers.push_back({k, v});
  }
  fresh.segment_map.assign(static_cast<size_t>(m), 0);
  fresh.positions = iota_positions(prefix.next_position, m);
  fresh.next_position = prefix.next_position + m;
  return ContextRepresentation{fresh, std::move(base), std::nullopt};
}

AttentionMask loo_mask(std::span<const int> segment_map, int i) {
  const int k = segment_map.empty() ? 0 : *std::max_element(segment_map.begin(), segment_map.end());
  ICOLAB_REQUIRE(i >= 1 && i <= k, "loo_mask: pair index " + std::to_string(i) + " outside 1.." + std::to_string(k));
  if (k == 1)
    throw DegenerateConfigError("leave-one-out masking with a single pair leaves an empty context; disable it");
  AttentionMask m;
  for (int s : segment_map) m.context_visible.push_back(s == i ? 0 : 1);
  return m;
}

AttentionMask token_dropout(const AttentionMask& mask, double p_drop, RngStream& rng) {
  ICOLAB_REQUIRE(p_drop >= 0.0 && p_drop < 1.0, "token_dropout: p_drop must be in [0, 1)");
  AttentionMask out = mask;
  if (p_drop == 0.0) return out;
  for (auto& v : out.context_visible)
    if (v && rng.bernoulli(p_drop)) v = 0;
  return out;
}

PairExample pair_example(const DemoPair& pair) {
  PairExample ex;
  ex.tokens = pair.x;
  ex.tokens.insert(ex.tokens.end(), pair.y.begin(), pair.y.end());
  const auto nx = static_cast<int64_t>(pair.x.size());
  for (int64_t j = nx - 1; j + 1 < static_cast<int64_t>(ex.tokens.size()); ++j) {
    ex.rows.push_back(j);
    ex.targets.push_back(ex.tokens[static_cast<size_t>(j + 1)]);
  }
  return ex;
}

namespace {

using Clock = std::chrono::steady_clock;

int64_t grad_census(const std::vector<Tensor>& tensors) {
  std::unordered_set<const void*> seen;
  int64_t n = 0;
  for (const auto& t : tensors)
    if (t.defined() && t.has_grad() && seen.insert(t.node()).second) n += t.numel();
  return n;
}

std::vector<Tensor> model_tensors(const ModelWeights<float>& w) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : w.named()) out.push_back(t);
  return out;
}

std::vector<int> pick_pairs(int k, int batch, RngStream& rng) {
  std::vector<int> all(static_cast<size_t>(k));
  std::iota(all.begin(), all.end(), 0);
  if (batch <= 0 || batch >= k) return all;
  auto sel = rng.sample_without_replacement(k, batch);
  std::sort(sel.begin(), sel.end());
  return sel;
}

bool is_baseline(Method m) { return m == Method::kPromptTuning || m == Method::kPrefixTuning; }

// The context's inference-time form: detached prompt or realized prefix.
void fill_inference(const ModelConfig& cfg, const ContextRepresentation& ctx, InferenceContext& inf) {
  if (ctx.is_prompt()) {
    SoftPrompt<float> p = ctx.prompt();
    p.rows = p.rows.detach();
    inf.prompt = std::move(p);
    return;
  }
  GradientTape<float> scratch;
  KVPrefix<float> p = realize_prefix(scratch, cfg, ctx);
  for (auto& l : p.layers) {
    l.keys = l.keys.detach();
    l.values = l.values.detach();
  }
  inf.prefix = std::move(p);
}

}  // namespace

AdaptResult adapt_context(const ModelWeights<float>& model, const DemonstrationSet& demos,
                          const AdaptConfig& config, std::optional<ContextRepresentation> initial,
                          const LoraSet<float>* lora) {
  config.validate();
  ICOLAB_REQUIRE(demos.k() >= 1, "adapt_context: no demonstrations");
  const auto& cfg = model.config;
  RngStream rng = RngStream(config.seed).split("adapt-context");
  AdaptResult res;
  res.method = config.method;
  const auto t0 = Clock::now();

  ContextRepresentation ctx;
  if (initial) {
    ctx = std::move(*initial);
  } else {
    switch (config.method) {
      case Method::kCtPrompt: ctx = init_ct_prompt(model, demos); break;
      case Method::kCtKv: ctx = init_ct_kv(model, demos, lora); break;
      case Method::kCtV: ctx = make_ct_v(init_ct_kv(model, demos, lora).prefix()); break;
      case Method::kCtPrefix:
        ctx = make_ct_prefix(init_ct_kv(model, demos, lora).prefix(), config.m, rng.split("ct-prefix"));
        break;
      case Method::kPromptTuning:
      case Method::kPrefixTuning:
        ctx = init_baseline(model, config.init, config.m, config.method == Method::kPrefixTuning,
                            rng.split("init"));
        break;
      default:
        throw ContractViolation(std::string("adapt_context: method ") + method_name(config.method) +
                                " does not optimize a context");
    }
  }
  const bool use_loo = config.leave_one_out && !is_baseline(config.method);
  const auto seg = ctx.segment_map();
  if (use_loo && demos.k() == 1)
    throw DegenerateConfigError("leave-one-out masking with k = 1 leaves an empty context; disable it");

  auto params = ctx.trainable();
  std::vector<PairExample> examples;
  for (const auto& p : demos.pairs) examples.push_back(pair_example(p));

  if (config.iterations > 0) {
    AdamOptimizer<float> opt(params, CosineSchedule{config.lr, config.iterations});
    RngStream drop = rng.split("dropout");
    RngStream batches = rng.split("batches");
    ops::AttentionCounter counter;
    for (int step = 0; step < config.iterations; ++step) {
      const auto s0 = Clock::now();
      GradientTape<float> tape;
      std::optional<KVPrefix<float>> prefix;
      if (!ctx.is_prompt()) prefix = realize_prefix(tape, cfg, ctx);
      Tensor total;
      for (int i : pick_pairs(demos.k(), config.batch, batches)) {
        const auto& ex = examples[static_cast<size_t>(i)];
        AttentionMask mask = use_loo ? loo_mask(seg, i + 1) : AttentionMask::all_visible(ctx.length());
        mask = token_dropout(mask, config.p_drop, drop);
        ForwardRequest<float> rq;
        rq.tokens = ex.tokens;
        rq.prompt = ctx.is_prompt() ? &ctx.prompt() : nullptr;
        rq.prefix = prefix ? &*prefix : nullptr;
        rq.mask = &mask;
        rq.lora = lora;
        rq.logit_rows = ex.rows;
        rq.counter = &counter;
        auto logits = forward_lm(tape, model, rq);
        auto loss = ops::cross_entropy(tape, logits, std::span<const int>(ex.targets));
        total = total.defined() ? ops::add(tape, total, loss) : loss;
      }
      const double value = total.item();
      if (!std::isfinite(value))
        throw NumericError("adapt_context: non-finite loss at iteration " + std::to_string(step));
      tape.backward(total);
      opt.step();
      res.losses.push_back(value);
      res.step_seconds.push_back(std::chrono::duration<double>(Clock::now() - s0).count());
    }
    res.attention_products = counter.query_key_products;
    res.attention_per_head = counter.per_head_last;
  }
  std::vector<Tensor> census = params;
  for (const auto& t : model_tensors(model)) census.push_back(t);
  if (lora) for (const auto& t : lora->params()) census.push_back(t);
  res.census_params = grad_census(census);
  res.train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();

  int64_t count = 0;
  for (const auto& t : params) count += t.numel();
  res.trainable_params = count;
  fill_inference(cfg, ctx, res.inference);
  for (auto& t : params) t.drop_grad();
  res.context = std::move(ctx);
  return res;
}

AdaptResult adapt_ttt(const ModelWeights<float>& model, const DemonstrationSet& demos,
                      const AdaptConfig& config) {
  config.validate();
  ICOLAB_REQUIRE(demos.k() >= 1, "adapt_ttt: no demonstrations");
  const auto& cfg = model.config;
  RngStream rng = RngStream(config.seed).split("adapt-ttt");
  AdaptResult res;
  res.method = Method::kTtt;
  const auto t0 = Clock::now();
  const auto targets = default_lora_targets();
  LoraSet<float> lora = make_lora(cfg, config.lora_rank, targets, config.lora_scaling, rng.split("lora"));
  auto params = lora.params();
  const int k = demos.k();

  if (config.ttt_iterations > 0) {
    AdamOptimizer<float> opt(params, CosineSchedule{config.ttt_lr, config.ttt_iterations});
    RngStream perm = rng.split("permutations");
    RngStream batches = rng.split("batches");
    ops::AttentionCounter counter;
    for (int step = 0; step < config.ttt_iterations; ++step) {
      const auto s0 = Clock::now();
      GradientTape<float> tape;
      Tensor total;
      for (int i : pick_pairs(k, config.ttt_batch, batches)) {
        std::vector<int> others;
        for (int j = 0; j < k; ++j)
          if (j != i) others.push_back(j);
        perm.shuffle(others.begin(), others.end());
        std::vector<int> tokens;
        for (int j : others) {
          const auto& p = demos.pairs[static_cast<size_t>(j)];
          tokens.insert(tokens.end(), p.x.begin(), p.x.end());
          tokens.insert(tokens.end(), p.y.begin(), p.y.end());
        }
        const auto offset = static_cast<int64_t>(tokens.size());
        auto ex = pair_example(demos.pairs[static_cast<size_t>(i)]);
        tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
        for (auto& r : ex.rows) r += offset;
        ForwardRequest<float> rq;
        rq.tokens = tokens;
        rq.lora = &lora;
        rq.logit_rows = ex.rows;
        rq.counter = &counter;
        auto logits = forward_lm(tape, model, rq);
        auto loss = ops::cross_entropy(tape, logits, std::span<const int>(ex.targets));
        total = total.defined() ? ops::add(tape, total, loss) : loss;
      }
      const double value = total.item();
      if (!std::isfinite(value))
        throw NumericError("adapt_ttt: non-finite loss at iteration " + std::to_string(step));
      tape.backward(total);
      opt.step();
      res.losses.push_back(value);
      res.step_seconds.push_back(std::chrono::duration<double>(Clock::now() - s0).count());
    }
    res.attention_products = counter.query_key_products;
    res.attention_per_head = counter.per_head_last;
  }
  std::vector<Tensor> census = params;
  for (const auto& t : model_tensors(model)) census.push_back(t);
  res.census_params = grad_census(census);
  res.trainable_params = lora.trainable_count();
  for (auto& t : params) t.set_requires_grad(false);
  res.train_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  res.inference.literal = demos.context_tokens();
  res.inference.lora = lora;
  res.lora = std::move(lora);
  return res;
}

AdaptResult compose_ttt_ctkv(const ModelWeights<float>& model, const DemonstrationSet& demos,
                             const AdaptConfig& config) {
  AdaptResult ttt = adapt_ttt(model, demos, config);
  AdaptConfig ct = config;
  ct.method = Method::kCtKv;
  AdaptResult res = adapt_context(model, demos, ct, init_ct_kv(model, demos, &*ttt.lora), &*ttt.lora);
  res.method = Method::kTttCtKv;
  res.lora = ttt.lora;
  res.inference.lora = ttt.lora;
  res.losses.insert(res.losses.begin(), ttt.losses.begin(), ttt.losses.end());
  res.step_seconds.insert(res.step_seconds.begin(), ttt.step_seconds.begin(), ttt.step_seconds.end());
  res.attention_products += ttt.attention_products;
  res.train_seconds += ttt.train_seconds;
  res.trainable_params += ttt.trainable_params;
  res.census_params += ttt.census_params;
  return res;
}

AdaptResult adapt(const ModelWeights<float>& model, const DemonstrationSet& demos, const AdaptConfig& config) {
  switch (config.method) {
    case Method::kIcl: {
      config.validate();
      AdaptResult res;
      res.method = Method::kIcl;
      res.inference.literal = demos.context_tokens();
      return res;
    }
    case Method::kTtt: return adapt_ttt(model, demos, config);
    case Method::kTttCtKv: return compose_ttt_ctkv(model, demos, config);
    default: return adapt_context(model, demos, config);
  }
}

FisherEstimate fisher_estimate(const ModelWeights<float>& model, const KVPrefix<float>& prefix,
                               const DemonstrationSet& demos, bool leave_one_out) {
  const int k = demos.k();
  ICOLAB_REQUIRE(k >= 1, "fisher_estimate: no demonstrations");
  KVPrefix<float> p = prefix.clone();
  for (auto& t : p.tensors()) t.set_requires_grad(true);
  const size_t L = p.layers.size();
  std::vector<std::vector<double>> acc_k(L), acc_v(L);
  for (size_t l = 0; l < L; ++l) {
    acc_k[l].assign(static_cast<size_t>(p.layers[l].keys.numel()), 0.0);
    acc_v[l].assign(static_cast<size_t>(p.layers[l].values.numel()), 0.0);
  }
  for (int i = 0; i < k; ++i) {
    const auto ex = pair_example(demos.pairs[static_cast<size_t>(i)]);
    GradientTape<float> tape;
    std::optional<AttentionMask> mask;
    if (leave_one_out) mask = loo_mask(p.segment_map, i + 1);
    ForwardRequest<float> rq;
    rq.tokens = ex.tokens;
    rq.prefix = &p;
    rq.mask = mask ? &*mask : nullptr;
    rq.logit_rows = ex.rows;
    auto logits = forward_lm(tape, model, rq);
    // Gradient of log p(y_i | ...) is the negated NLL gradient; squares agree.
    auto loss = ops::cross_entropy(tape, logits, std::span<const int>(ex.targets));
    tape.backward(loss);
    for (size_t l = 0; l < L; ++l) {
      const auto gk = p.layers[l].keys.grad();
      const auto gv = p.layers[l].values.grad();
      for (size_t j = 0; j < gk.size(); ++j) acc_k[l][j] += static_cast<double>(gk[j]) * gk[j];
      for (size_t j = 0; j < gv.size(); ++j) acc_v[l][j] += static_cast<double>(gv[j]) * gv[j];
    }
  }
  FisherEstimate out;
  double sk = 0.0, sv = 0.0;
  size_t nk = 0, nv = 0;
  for (size_t l = 0; l < L; ++l) {
    double lk = 0.0, lv = 0.0;
    for (double v : acc_k[l]) lk += v / k;
    for (double v : acc_v[l]) lv += v / k;
    sk += lk, sv += lv;
    nk += acc_k[l].size(), nv += acc_v[l].size();
    out.layer_k.push_back(lk / static_cast<double>(acc_k[l].size()));
    out.layer_v.push_back(lv / static_cast<double>(acc_v[l].size()));
  }
  out.f_k = sk / static_cast<double>(nk);
  out.f_v = sv / static_cast<double>(nv);
  return out;
}

int64_t count_trainable_params(Method method, const ParamCountInputs& in) {
  const int64_t d = in.model.d_model, L = in.model.n_layers, c = in.context_len, m = in.m;
  auto lora = [&] {
    int64_t n = 0;
    for (auto t : default_lora_targets()) {
      const auto [din, dout] = lora_dims(in.model, t);
      n += static_cast<int64_t>(in.lora_rank) * (din + dout);
    }
    return n * L;
  };
  switch (method) {
    case Method::kIcl: return 0;
    case Method::kPromptTuning: return m * d;
    case Method::kPrefixTuning:
      if (in.init == InitScheme::kMlp)
        return m * d + PrefixMlp::kHidden * d + 2 * L * d * PrefixMlp::kHidden;
      return 2 * L * m * d;
    case Method::kCtPrompt: return c * d;
    case Method::kCtKv: return 2 * L * c * d;
    case Method::kCtV: return L * c * d;
    case Method::kCtPrefix: return 2 * L * m * d;
    case Method::kTtt: return lora();
    case Method::kTttCtKv: return lora() + 2 * L * c * d;
  }
  throw ConfigError("count_trainable_params: unknown method");
}

}  // namespace icolab
