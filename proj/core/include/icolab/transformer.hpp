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
#include <span>
#include <vector>

#include "icolab/model.hpp"
#include "icolab/ops.hpp"

namespace icolab {

// Layer-wise key/value rows prepended to each attention layer. Prefix tokens
// generate no queries. Keys already carry their rotary encoding.
template <class T>
struct KVPrefix {
  struct Layer {
    BasicTensor<T> keys;    // [H, m, Dh]
    BasicTensor<T> values;  // [H, m, Dh]
  };
  std::vector<Layer> layers;
  // Demonstration pair (1..k) owning each token; 0 for tokens without one.
  std::vector<int> segment_map;
  // Absolute position each token was encoded at.
  std::vector<int64_t> positions;
  // Position of the first token that follows the prefix.
  int64_t next_position = 0;

  int64_t length() const { return static_cast<int64_t>(segment_map.size()); }
  // All key and value tensors in layer order (keys then values per layer).
  std::vector<BasicTensor<T>> tensors() const;
  // Deep copy: independent leaves with the same requires_grad flags.
  KVPrefix clone() const;
  void validate(const ModelConfig& config) const;
};

// Trainable embedding rows prepended to the input; they do produce queries.
template <class T>
struct SoftPrompt {
  BasicTensor<T> rows;  // [m, d_model]
  std::vector<int> segment_map;
  std::vector<int64_t> positions;
  int64_t next_position = 0;

  int64_t length() const { return static_cast<int64_t>(segment_map.size()); }
  SoftPrompt clone() const;
  void validate(const ModelConfig& config) const;
};

// Attention visibility of the context (prefix or soft-prompt) tokens, composed
// with the causal mask over the input tokens. A hidden context token is
// invisible to every query position. Positions are never re-indexed.
struct AttentionMask {
  std::vector<uint8_t> context_visible;

  static AttentionMask all_visible(int64_t context_len) {
    return AttentionMask{std::vector<uint8_t>(static_cast<size_t>(context_len), 1)};
  }
  int64_t size() const { return static_cast<int64_t>(context_visible.size()); }
  int64_t visible_count() const;
  bool visible(int64_t i) const { return context_visible.at(static_cast<size_t>(i)) != 0; }
  // Whether query row q (counted over [context; tokens]) may attend key row key
  // in the same numbering. Soft-prompt layouts share one numbering for both.
  bool attendable(int64_t q, int64_t key) const;
};

enum class LoraTarget { kQuery, kKey, kValue, kOutput, kUp, kDown };

const char* lora_target_name(LoraTarget t);

// Low-rank update on one projection: W_eff = W + scaling * B A.
template <class T>
struct LoraAdapter {
  int layer = 0;
  LoraTarget target = LoraTarget::kQuery;
  BasicTensor<T> a;  // [r, d_in]
  BasicTensor<T> b;  // [d_out, r]
  T scaling = T(1);
  int rank() const { return static_cast<int>(a.dim(0)); }
};

template <class T>
struct LoraSet {
  std::vector<LoraAdapter<T>> adapters;
  const LoraAdapter<T>* find(int layer, LoraTarget target) const;
  std::vector<BasicTensor<T>> params() const;
  int64_t trainable_count() const;
  LoraSet clone() const;
};

std::vector<LoraTarget> default_lora_targets();

// Projection input/output widths for a LoRA target.
std::pair<int64_t, int64_t> lora_dims(const ModelConfig& config, LoraTarget target);

// A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0. Throws ContractViolation when
// rank >= min(d_in, d_out).
LoraSet<float> make_lora(const ModelConfig& config, int rank, std::span<const LoraTarget> targets,
                         double scaling, RngStream rng);

template <class T>
struct ForwardRequest {
  std::span<const int> tokens;
  const SoftPrompt<T>* prompt = nullptr;
  const KVPrefix<T>* prefix = nullptr;
  // Visibility of prompt/prefix tokens; nullptr means all visible.
  const AttentionMask* mask = nullptr;
  const LoraSet<T>* lora = nullptr;
  // Position of tokens[0] when there is no prompt/prefix.
  int64_t start_position = 0;
  // Physically drop prompt/prefix tokens hidden from every query. Their
  // positions are kept, so the result equals the masked computation.
  bool compact_hidden = true;
  // If non-empty, logits are produced only for these rows of `tokens`.
  std::span<const int64_t> logit_rows;
  ops::AttentionCounter* counter = nullptr;
  // Receives post-rotary keys/values of every row processed (prompt rows
  // included), one entry per layer, shape [H, rows, Dh].
  std::vector<typename KVPrefix<T>::Layer>* capture = nullptr;
};

// Next-token logits [rows, V] for the input tokens.
template <class T>
BasicTensor<T> forward_lm(GradientTape<T>& tape, const ModelWeights<T>& weights,
                          const ForwardRequest<T>& request);

template <class T>
BasicTensor<T> forward_lm(const ModelWeights<T>& weights, std::span<const int> tokens);

// Keys/values of every layer for the context tokens, encoded at positions
// 0..|C|-1. segment_map must have one entry per token.
template <class T>
KVPrefix<T> capture_kv(const ModelWeights<T>& weights, std::span<const int> context,
                       std::vector<int> segment_map, const LoraSet<T>* lora = nullptr);

// Conditioning used at inference: literal context tokens (ICL / TTT), a soft
// prompt, or a KV prefix, optionally with LoRA adapters.
template <class T>
struct Conditioning {
  std::vector<int> literal;
  const SoftPrompt<T>* prompt = nullptr;
  const KVPrefix<T>* prefix = nullptr;
  const LoraSet<T>* lora = nullptr;
};

// Argmax decoding (lowest id wins ties) until stop_token (included in the
// output) or max_new tokens.
template <class T>
std::vector<int> greedy_decode(const ModelWeights<T>& weights, const Conditioning<T>& cond,
                               std::span<const int> query, int max_new, int stop_token);

enum class OptionScoring { kMeanNll, kSumNll };

struct OptionScores {
  int chosen = 0;
  std::vector<double> mean_nll;
  std::vector<double> sum_nll;
};

// Lowest-loss option (first wins ties) given [cond; query].
template <class T>
OptionScores score_options(const ModelWeights<T>& weights, const Conditioning<T>& cond,
                           std::span<const int> query, const std::vector<std::vector<int>>& options,
                           OptionScoring scoring = OptionScoring::kMeanNll);

// Prefix made of [a; b] per layer, recorded on the tape so gradients reach
// the trainable parts. next_position is taken from b.
template <class T>
KVPrefix<T> concat_prefix(GradientTape<T>& tape, const KVPrefix<T>& a, const KVPrefix<T>& b);

// Lowest-index argmax.
template <class T>
int argmax_row(std::span<const T> row);

}  // namespace icolab
