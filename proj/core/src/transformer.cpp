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

#include "icolab/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace icolab {
namespace {

template <class T>
BasicTensor<T> linear(GradientTape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const LoraSet<T>* lora, int layer, LoraTarget target) {
  auto y = ops::matmul(tape, x, w, /*transpose_b=*/true);
  if (lora != nullptr) {
    if (const auto* ad = lora->find(layer, target)) {
      auto low = ops::matmul(tape, x, ad->a, true);
      auto up = ops::matmul(tape, low, ad->b, true);
      y = ops::add(tape, y, ops::scale(tape, up, ad->scaling));
    }
  }
  return y;
}

template <class T>
BasicTensor<T> concat_leaf(const BasicTensor<T>& a, const BasicTensor<T>& b, int axis) {
  GradientTape<T> scratch;
  return ops::concat(scratch, a.detach(), b.detach(), axis).detach();
}

// Extends `cache` with rows captured from the most recent forward pass.
template <class T>
void append_to_cache(KVPrefix<T>& cache, const std::vector<typename KVPrefix<T>::Layer>& fresh,
                     int64_t first_position, int64_t count) {
  if (cache.layers.empty()) {
    for (const auto& l : fresh) cache.layers.push_back({l.keys.detach(), l.values.detach()});
  } else {
    for (size_t i = 0; i < fresh.size(); ++i) {
      cache.layers[i].keys = concat_leaf(cache.layers[i].keys, fresh[i].keys, 1);
      cache.layers[i].values = concat_leaf(cache.layers[i].values, fresh[i].values, 1);
    }
  }
  for (int64_t j = 0; j < count; ++j) {
    cache.segment_map.push_back(0);
    cache.positions.push_back(first_position + j);
  }
  cache.next_position = first_position + count;
}

template <class T>
void check_tokens(std::span<const int> tokens, const ModelConfig& cfg) {
  for (int t : tokens) {
    ICOLAB_REQUIRE(t >= 0 && t < cfg.vocab_size,
                   "token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
  }
}

}  // namespace

const char* lora_target_name(LoraTarget t) {
  switch (t) {
    case LoraTarget::kQuery: return "wq";
    case LoraTarget::kKey: return "wk";
    case LoraTarget::kValue: return "wv";
    case LoraTarget::kOutput: return "wo";
    case LoraTarget::kUp: return "w_up";
    case LoraTarget::kDown: return "w_down";
  }
  return "?";
}

int64_t AttentionMask::visible_count() const {
  return std::count_if(context_visible.begin(), context_visible.end(),
                       [](uint8_t v) { return v != 0; });
}

bool AttentionMask::attendable(int64_t q, int64_t key) const {
  const int64_t m = size();
  if (key > q) return false;
  if (key >= m || key == q) return true;
  return visible(key);
}

template <class T>
std::vector<BasicTensor<T>> KVPrefix<T>::tensors() const {
  std::vector<BasicTensor<T>> out;
  for (const auto& l : layers) {
    out.push_back(l.keys);
    out.push_back(l.values);
  }
  return out;
}

template <class T>
KVPrefix<T> KVPrefix<T>::clone() const {
  KVPrefix out = *this;
  for (auto& l : out.layers) {
    l.keys = l.keys.clone();
    l.values = l.values.clone();
  }
  return out;
}

template <class T>
void KVPrefix<T>::validate(const ModelConfig& cfg) const {
  ICOLAB_REQUIRE(static_cast<int>(layers.size()) == cfg.n_layers,
                 "KVPrefix: layer count differs from model");
  ICOLAB_REQUIRE(positions.size() == segment_map.size(),
                 "KVPrefix: positions and segment_map lengths differ");
  const Shape expect{cfg.n_heads, length(), cfg.d_head()};
  for (const auto& l : layers) {
    ICOLAB_REQUIRE(l.keys.shape() == expect && l.values.shape() == expect,
                   "KVPrefix: layer tensors must be " + shape_str(expect));
    for (const T v : l.keys.data())
      if (!std::isfinite(v)) throw NumericError("KVPrefix: non-finite key");
    for (const T v : l.values.data())
      if (!std::isfinite(v)) throw NumericError("KVPrefix: non-finite value");
  }
}

template <class T>
SoftPrompt<T> SoftPrompt<T>::clone() const {
  SoftPrompt out = *this;
  out.rows = rows.clone();
  return out;
}

template <class T>
void SoftPrompt<T>::validate(const ModelConfig& cfg) const {
  ICOLAB_REQUIRE(rows.rank() == 2 && rows.dim(0) == length() && rows.dim(1) == cfg.d_model,
                 "SoftPrompt: rows must be [m, d_model] with m = segment_map length");
  ICOLAB_REQUIRE(positions.size() == segment_map.size(),
                 "SoftPrompt: positions and segment_map lengths differ");
  for (const T v : rows.data())
    if (!std::isfinite(v)) throw NumericError("SoftPrompt: non-finite entry");
}

template <class T>
const LoraAdapter<T>* LoraSet<T>::find(int layer, LoraTarget target) const {
  for (const auto& a : adapters)
    if (a.layer == layer && a.target == target) return &a;
  return nullptr;
}

template <class T>
std::vector<BasicTensor<T>> LoraSet<T>::params() const {
  std::vector<BasicTensor<T>> out;
  for (const auto& a : adapters) {
    out.push_back(a.a);
    out.push_back(a.b);
  }
  return out;
}

template <class T>
int64_t LoraSet<T>::trainable_count() const {
  int64_t n = 0;
  for (const auto& a : adapters) n += a.a.numel() + a.b.numel();
  return n;
}

template <class T>
LoraSet<T> LoraSet<T>::clone() const {
  LoraSet out = *this;
  for (auto& a : out.adapters) {
    a.a = a.a.clone();
    a.b = a.b.clone();
  }
  return out;
}

std::vector<LoraTarget> default_lora_targets() {
  return {LoraTarget::kQuery, LoraTarget::kKey, LoraTarget::kValue,
          LoraTarget::kOutput, LoraTarget::kUp, LoraTarget::kDown};
}

std::pair<int64_t, int64_t> lora_dims(const ModelConfig& cfg, LoraTarget target) {
  const int64_t d = cfg.d_model, f = cfg.d_ffn();
  switch (target) {
    case LoraTarget::kUp: return {d, f};
    case LoraTarget::kDown: return {f, d};
    default: return {d, d};
  }
}

LoraSet<float> make_lora(const ModelConfig& cfg, int rank, std::span<const LoraTarget> targets,
                         double scaling, RngStream rng) {
  LoraSet<float> set;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const auto target : targets) {
      const auto [d_in, d_out] = lora_dims(cfg, target);
      ICOLAB_REQUIRE(rank >= 1 && rank < std::min(d_in, d_out),
                     "LoRA rank " + std::to_string(rank) + " must be in [1, min(d_in, d_out)) = [1, " +
                         std::to_string(std::min(d_in, d_out)) + ")");
      RngStream r = rng.split(static_cast<uint64_t>(l)).split(lora_target_name(target));
      const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
      std::vector<float> av(static_cast<size_t>(rank * d_in));
      for (auto& v : av) v = static_cast<float>(r.uniform(-bound, bound));
      LoraAdapter<float> ad;
      ad.layer = l;
      ad.target = target;
      ad.a = Tensor::from({rank, d_in}, std::move(av), true);
      ad.b = Tensor::zeros({d_out, rank}, true);
      ad.scaling = static_cast<float>(scaling);
      set.adapters.push_back(std::move(ad));
    }
  }
  return set;
}

template <class T>
BasicTensor<T> forward_lm(GradientTape<T>& tape, const ModelWeights<T>& w,
                          const ForwardRequest<T>& rq) {
  const ModelConfig& cfg = w.config;
  ICOLAB_REQUIRE(!(rq.prompt && rq.prefix), "forward_lm: pass a soft prompt or a KV prefix, not both");
  const auto n = static_cast<int64_t>(rq.tokens.size());
  ICOLAB_REQUIRE(n > 0, "forward_lm: empty token sequence");
  check_tokens<T>(rq.tokens, cfg);
  const int64_t ctx_len = rq.prompt ? rq.prompt->length() : rq.prefix ? rq.prefix->length() : 0;
  if (rq.mask != nullptr) {
    ICOLAB_REQUIRE(rq.mask->size() == ctx_len,
                   "forward_lm: mask covers " + std::to_string(rq.mask->size()) +
                       " context tokens but the context has " + std::to_string(ctx_len));
  }
  if (ctx_len + n > cfg.max_seq_len) {
    throw ContractViolation("forward_lm: sequence of " + std::to_string(ctx_len + n) +
                            " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  if (rq.prompt) rq.prompt->validate(cfg);

  std::vector<int64_t> keep;
  bool any_hidden = false;
  for (int64_t j = 0; j < ctx_len; ++j) {
    if (rq.mask == nullptr || rq.mask->visible(j)) {
      keep.push_back(j);
    } else {
      any_hidden = true;
    }
  }
  const bool compact = rq.compact_hidden && any_hidden;

  std::vector<uint8_t> ctx_visible;
  std::vector<int64_t> pos;
  BasicTensor<T> h = ops::embedding(tape, w.tok_emb, rq.tokens);
  int64_t m_prompt = 0, m_prefix = 0;
  std::vector<typename KVPrefix<T>::Layer> pre;
  int64_t first_pos = rq.start_position;

  auto collect = [&](const std::vector<int64_t>& src_pos) {
    if (compact) {
      for (int64_t j : keep) pos.push_back(src_pos[static_cast<size_t>(j)]);
      ctx_visible.assign(keep.size(), 1);
    } else {
      pos.insert(pos.end(), src_pos.begin(), src_pos.end());
      ctx_visible = rq.mask ? rq.mask->context_visible
                            : std::vector<uint8_t>(static_cast<size_t>(ctx_len), 1);
    }
  };

  if (rq.prompt) {
    auto rows = compact ? ops::select_rows(tape, rq.prompt->rows, keep) : rq.prompt->rows;
    m_prompt = rows.dim(0);
    collect(rq.prompt->positions);
    h = ops::concat(tape, rows, h, 0);
    first_pos = rq.prompt->next_position;
  } else if (rq.prefix) {
    ICOLAB_REQUIRE(static_cast<int>(rq.prefix->layers.size()) == cfg.n_layers,
                   "forward_lm: prefix layer count differs from model");
    collect(rq.prefix->positions);
    pos.clear();  // prefix positions are baked into its keys
    for (const auto& l : rq.prefix->layers) {
      if (compact) {
        pre.push_back({ops::select_rows(tape, l.keys, keep), ops::select_rows(tape, l.values, keep)});
      } else {
        pre.push_back(l);
      }
    }
    m_prefix = compact ? static_cast<int64_t>(keep.size()) : ctx_len;
    first_pos = rq.prefix->next_position;
  }
  for (int64_t j = 0; j < n; ++j) pos.push_back(first_pos + j);

  const int64_t rows = m_prompt + n;
  const int64_t keys = m_prefix + rows;
  std::vector<uint8_t> hidden(static_cast<size_t>(rows * keys), 0);
  bool any_masked = false;
  for (int64_t q = 0; q < rows; ++q) {
    for (int64_t k = 0; k < keys; ++k) {
      bool hide;
      if (k < m_prefix) {
        hide = !ctx_visible[static_cast<size_t>(k)];
      } else {
        const int64_t s = k - m_prefix;
        hide = s > q || (s < m_prompt && s != q && !ctx_visible[static_cast<size_t>(s)]);
      }
      hidden[static_cast<size_t>(q * keys + k)] = hide;
      any_masked = any_masked || hide;
    }
  }

  const int64_t heads = cfg.n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cfg.d_head()));
  const T eps = static_cast<T>(cfg.norm_eps);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[static_cast<size_t>(l)];
    auto xn = ops::rmsnorm(tape, h, lw.attn_norm, eps);
    auto q = ops::split_heads(tape, linear(tape, xn, lw.wq, rq.lora, l, LoraTarget::kQuery), heads);
    auto k = ops::split_heads(tape, linear(tape, xn, lw.wk, rq.lora, l, LoraTarget::kKey), heads);
    auto v = ops::split_heads(tape, linear(tape, xn, lw.wv, rq.lora, l, LoraTarget::kValue), heads);
    q = ops::rope(tape, q, pos, cfg.rope_base);
    k = ops::rope(tape, k, pos, cfg.rope_base);
    if (rq.capture != nullptr) rq.capture->push_back({k, v});
    if (!pre.empty()) {
      k = ops::concat(tape, pre[static_cast<size_t>(l)].keys, k, 1);
      v = ops::concat(tape, pre[static_cast<size_t>(l)].values, v, 1);
    }
    auto scores = ops::scale(tape, ops::matmul(tape, q, k, true), inv_sqrt);
    if (rq.counter != nullptr) rq.counter->add(heads, rows, keys);
    if (any_masked) scores = ops::masked_fill(tape, scores, hidden, T(-1e30));
    auto probs = ops::softmax(tape, scores);
    auto attn = ops::merge_heads(tape, ops::matmul(tape, probs, v));
    h = ops::add(tape, h, linear(tape, attn, lw.wo, rq.lora, l, LoraTarget::kOutput));
    auto xf = ops::rmsnorm(tape, h, lw.ffn_norm, eps);
    auto up = ops::gelu(tape, linear(tape, xf, lw.w_up, rq.lora, l, LoraTarget::kUp));
    h = ops::add(tape, h, linear(tape, up, lw.w_down, rq.lora, l, LoraTarget::kDown));
  }

  std::vector<int64_t> out_rows;
  if (!rq.logit_rows.empty()) {
    for (int64_t r : rq.logit_rows) {
      ICOLAB_REQUIRE(r >= 0 && r < n, "forward_lm: logit row out of range");
      out_rows.push_back(m_prompt + r);
    }
  } else if (m_prompt > 0) {
    for (int64_t r = 0; r < n; ++r) out_rows.push_back(m_prompt + r);
  }
  if (!out_rows.empty()) h = ops::select_rows(tape, h, out_rows);
  auto hf = ops::rmsnorm(tape, h, w.final_norm, eps);
  return ops::matmul(tape, hf, w.unembed, true);
}

template <class T>
BasicTensor<T> forward_lm(const ModelWeights<T>& weights, std::span<const int> tokens) {
  GradientTape<T> tape;
  ForwardRequest<T> rq;
  rq.tokens = tokens;
  return forward_lm(tape, weights, rq).detach();
}

template <class T>
KVPrefix<T> capture_kv(const ModelWeights<T>& weights, std::span<const int> context,
                       std::vector<int> segment_map, const LoraSet<T>* lora) {
  ICOLAB_REQUIRE(!context.empty(), "capture_kv: empty context");
  ICOLAB_REQUIRE(segment_map.size() == context.size(),
                 "capture_kv: segment_map must have one entry per context token");
  GradientTape<T> tape;
  std::vector<typename KVPrefix<T>::Layer> captured;
  ForwardRequest<T> rq;
  rq.tokens = context;
  rq.lora = lora;
  const int64_t last = static_cast<int64_t>(context.size()) - 1;
  rq.logit_rows = std::span<const int64_t>(&last, 1);
  rq.capture = &captured;
  forward_lm(tape, weights, rq);
  KVPrefix<T> out;
  for (const auto& l : captured) out.layers.push_back({l.keys.detach(), l.values.detach()});
  out.segment_map = std::move(segment_map);
  for (int64_t j = 0; j <= last; ++j) out.positions.push_back(j);
  out.next_position = last + 1;
  return out;
}

template <class T>
int argmax_row(std::span<const T> row) {
  int best = 0;
  for (size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[static_cast<size_t>(best)]) best = static_cast<int>(i);
  return best;
}

namespace {

// Runs [cond; query], returns last-row logits and fills `cache` with every
// key/value the continuation must attend to.
template <class T>
std::vector<T> prime(const ModelWeights<T>& weights, const Conditioning<T>& cond,
                     std::span<const int> query, KVPrefix<T>& cache) {
  std::vector<int> tokens = cond.literal;
  tokens.insert(tokens.end(), query.begin(), query.end());
  ICOLAB_REQUIRE(!tokens.empty(), "decode: empty query");
  GradientTape<T> tape;
  std::vector<typename KVPrefix<T>::Layer> captured;
  ForwardRequest<T> rq;
  rq.tokens = tokens;
  rq.prompt = cond.prompt;
  rq.prefix = cond.prefix;
  rq.lora = cond.lora;
  const int64_t last = static_cast<int64_t>(tokens.size()) - 1;
  rq.logit_rows = std::span<const int64_t>(&last, 1);
  rq.capture = &captured;
  auto logits = forward_lm(tape, weights, rq);

  cache = KVPrefix<T>{};
  int64_t start = 0;
  if (cond.prefix != nullptr) {
    cache = *cond.prefix;
    for (auto& l : cache.layers) {
      l.keys = l.keys.detach();
      l.values = l.values.detach();
    }
    start = cond.prefix->next_position;
  } else if (cond.prompt != nullptr) {
    // Captured rows cover the prompt rows too, at their own positions.
    append_to_cache(cache, captured, 0, 0);
    cache.segment_map.assign(cond.prompt->segment_map.begin(), cond.prompt->segment_map.end());
    cache.positions = cond.prompt->positions;
    const auto n = static_cast<int64_t>(tokens.size());
    for (int64_t j = 0; j < n; ++j) {
      cache.segment_map.push_back(0);
      cache.positions.push_back(cond.prompt->next_position + j);
    }
    cache.next_position = cond.prompt->next_position + n;
    return {logits.data().begin(), logits.data().end()};
  }
  append_to_cache(cache, captured, start, static_cast<int64_t>(tokens.size()));
  return {logits.data().begin(), logits.data().end()};
}

template <class T>
BasicTensor<T> continue_with(const ModelWeights<T>& weights, const LoraSet<T>* lora,
                             KVPrefix<T>& cache, std::span<const int> tokens, bool extend) {
  GradientTape<T> tape;
  std::vector<typename KVPrefix<T>::Layer> captured;
  ForwardRequest<T> rq;
  rq.tokens = tokens;
  rq.prefix = &cache;
  rq.lora = lora;
  rq.capture = extend ? &captured : nullptr;
  auto logits = forward_lm(tape, weights, rq);
  if (extend) append_to_cache(cache, captured, cache.next_position, static_cast<int64_t>(tokens.size()));
  return logits;
}

}  // namespace

template <class T>
std::vector<int> greedy_decode(const ModelWeights<T>& weights, const Conditioning<T>& cond,
                               std::span<const int> query, int max_new, int stop_token) {
  ICOLAB_REQUIRE(max_new > 0, "greedy_decode: max_new must be positive");
  KVPrefix<T> cache;
  std::vector<T> last = prime(weights, cond, query, cache);
  std::vector<int> out;
  for (;;) {
    const int tok = argmax_row<T>(last);
    out.push_back(tok);
    if (tok == stop_token || static_cast<int>(out.size()) >= max_new) break;
    if (cache.next_position + 1 > weights.config.max_seq_len) break;
    const int one[1] = {tok};
    auto logits = continue_with(weights, cond.lora, cache, std::span<const int>(one, 1), true);
    last.assign(logits.data().begin(), logits.data().end());
  }
  return out;
}

template <class T>
OptionScores score_options(const ModelWeights<T>& weights, const Conditioning<T>& cond,
                           std::span<const int> query, const std::vector<std::vector<int>>& options,
                           OptionScoring scoring) {
  ICOLAB_REQUIRE(options.size() >= 2, "score_options: at least two options required");
  for (const auto& o : options) ICOLAB_REQUIRE(!o.empty(), "score_options: empty option sequence");
  KVPrefix<T> cache;
  const std::vector<T> first = prime(weights, cond, query, cache);
  const auto first_logits =
      BasicTensor<T>::from({1, static_cast<int64_t>(first.size())}, first);
  OptionScores out;
  for (const auto& opt : options) {
    double total = ops::row_nll(first_logits, std::span<const int>(opt.data(), 1))[0];
    if (opt.size() > 1) {
      const std::span<const int> feed(opt.data(), opt.size() - 1);
      auto logits = continue_with(weights, cond.lora, cache, feed, false);
      const std::span<const int> targets(opt.data() + 1, opt.size() - 1);
      for (double v : ops::row_nll(logits, targets)) total += v;
    }
    out.sum_nll.push_back(total);
    out.mean_nll.push_back(total / static_cast<double>(opt.size()));
  }
  const auto& key = scoring == OptionScoring::kMeanNll ? out.mean_nll : out.sum_nll;
  out.chosen = static_cast<int>(std::min_element(key.begin(), key.end()) - key.begin());
  return out;
}

template <class T>
KVPrefix<T> concat_prefix(GradientTape<T>& tape, const KVPrefix<T>& a, const KVPrefix<T>& b) {
  ICOLAB_REQUIRE(a.layers.size() == b.layers.size(), "concat_prefix: layer counts differ");
  KVPrefix<T> out;
  for (size_t i = 0; i < a.layers.size(); ++i) {
    out.layers.push_back({ops::concat(tape, a.layers[i].keys, b.layers[i].keys, 1),
                          ops::concat(tape, a.layers[i].values, b.layers[i].values, 1)});
  }
  out.segment_map = a.segment_map;
  out.segment_map.insert(out.segment_map.end(), b.segment_map.begin(), b.segment_map.end());
  out.positions = a.positions;
  out.positions.insert(out.positions.end(), b.positions.begin(), b.positions.end());
  out.next_position = b.next_position;
  return out;
}

#define ICOLAB_INSTANTIATE_TRANSFORMER(T)                                                        \
  template struct KVPrefix<T>;                                                                  \
  template struct SoftPrompt<T>;                                                                \
  template struct LoraSet<T>;                                                                   \
  template BasicTensor<T> forward_lm(GradientTape<T>&, const ModelWeights<T>&,                  \
                                     const ForwardRequest<T>&);                                 \
  template BasicTensor<T> forward_lm(const ModelWeights<T>&, std::span<const int>);             \
  template KVPrefix<T> capture_kv(const ModelWeights<T>&, std::span<const int>,                 \
                                  std::vector<int>, const LoraSet<T>*);                         \
  template std::vector<int> greedy_decode(const ModelWeights<T>&, const Conditioning<T>&,       \
                                          std::span<const int>, int, int);                      \
  template OptionScores score_options(const ModelWeights<T>&, const Conditioning<T>&,           \
                                      std::span<const int>,                                     \
                                      const std::vector<std::vector<int>>&, OptionScoring);     \
  template KVPrefix<T> concat_prefix(GradientTape<T>&, const KVPrefix<T>&, const KVPrefix<T>&); \
  template int argmax_row(std::span<const T>);

ICOLAB_INSTANTIATE_TRANSFORMER(float)
ICOLAB_INSTANTIATE_TRANSFORMER(double)

}  // namespace icolab
