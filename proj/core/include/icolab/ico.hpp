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
#include <variant>
#include <vector>

#include "icolab/model.hpp"
#include "icolab/rng.hpp"
#include "icolab/tasks.hpp"
#include "icolab/transformer.hpp"

namespace icolab {

enum class Method {
  kIcl,
  kPromptTuning,
  kPrefixTuning,
  kCtPrompt,
  kCtKv,
  kCtV,
  kCtPrefix,
  kTtt,
  kTttCtKv,
};

const char* method_name(Method m);
Method method_from_name(const std::string& name);
std::vector<Method> all_methods();

enum class InitScheme { kDemoTokens, kRandomToken, kUniform, kMlp };

const char* init_scheme_name(InitScheme s);
InitScheme init_scheme_from_name(const std::string& name);

struct AdaptConfig {
  Method method = Method::kCtKv;
  // Context optimization (CT methods, prompt/prefix tuning, CT part of TTT+CT-KV).
  double lr = 1e-3;
  int iterations = 50;
  double p_drop = 0.0;
  bool leave_one_out = true;
  InitScheme init = InitScheme::kRandomToken;  // baselines only
  int m = 32;                                  // baseline and CT-Prefix length
  // Pairs per step; 0 means every pair.
  int batch = 0;
  // LoRA test-time training (TTT and the first stage of TTT+CT-KV).
  double ttt_lr = 1e-4;
  int ttt_iterations = 50;
  // Leave-one-out pairs per TTT step; 0 means every pair.
  int ttt_batch = 4;
  int lora_rank = 8;
  double lora_scaling = 1.0;
  // Fisher gradients with leave-one-out masking (off: unmasked).
  bool fisher_loo = false;
  uint64_t seed = 0;

  void validate() const;
};

// Per-method defaults for the desk-scale suite.
AdaptConfig default_adapt_config(Method method);

// Two-layer reparameterization of a prefix: seed rows [m, d] pass through
// tanh(seed W1^T) and one output matrix per layer for keys and for values.
struct PrefixMlp {
  static constexpr int kHidden = 512;
  Tensor seed;                  // [m, d]
  Tensor w1;                    // [512, d]
  std::vector<Tensor> w_keys;   // per layer [d, 512]
  std::vector<Tensor> w_values; // per layer [d, 512]
  std::vector<Tensor> params() const;
};

// theta_context: a soft prompt or a KV prefix (the trainable part), plus an
// optional frozen captured prefix that precedes it (CT-Prefix) and an
// optional MLP that generates the prefix.
struct ContextRepresentation {
  std::variant<SoftPrompt<float>, KVPrefix<float>> value;
  std::optional<KVPrefix<float>> frozen_base;
  std::optional<PrefixMlp> mlp;

  bool is_prompt() const { return std::holds_alternative<SoftPrompt<float>>(value); }
  const SoftPrompt<float>& prompt() const { return std::get<SoftPrompt<float>>(value); }
  const KVPrefix<float>& prefix() const { return std::get<KVPrefix<float>>(value); }
  // Tensors optimized by adapt_context.
  std::vector<Tensor> trainable() const;
  // Context length seen by attention (frozen base included).
  int64_t length() const;
  // Segment map over the full attended context.
  std::vector<int> segment_map() const;
  ContextRepresentation clone() const;
};

// Builds the attended prefix for a step. MLP outputs and the CT-Prefix
// concatenation are recorded on the tape.
KVPrefix<float> realize_prefix(GradientTape<float>& tape, const ModelConfig& config,
                               const ContextRepresentation& ctx);

// Detached conditioning inputs for inference.
struct InferenceContext {
  std::vector<int> literal;
  std::optional<SoftPrompt<float>> prompt;
  std::optional<KVPrefix<float>> prefix;
  std::optional<LoraSet<float>> lora;

  Conditioning<float> conditioning() const;
};

ContextRepresentation init_ct_prompt(const ModelWeights<float>& model, const DemonstrationSet& demos);
ContextRepresentation init_ct_kv(const ModelWeights<float>& model, const DemonstrationSet& demos,
                                 const LoraSet<float>* lora = nullptr);
// Baseline soft prompt (as_prefix = false) or KV prefix of m tokens without
// pair provenance.
ContextRepresentation init_baseline(const ModelWeights<float>& model, InitScheme scheme, int m,
                                    bool as_prefix, RngStream rng);
ContextRepresentation make_ct_v(const KVPrefix<float>& prefix);
ContextRepresentation make_ct_prefix(const KVPrefix<float>& prefix, int m, RngStream rng,
                                     double noise_sd = 0.02);

// Hides the tokens of pair i (1-based). Throws DegenerateConfigError if the
// context holds a single pair.
AttentionMask loo_mask(std::span<const int> segment_map, int i);
// Hides each visible token independently with probability p_drop.
AttentionMask token_dropout(const AttentionMask& mask, double p_drop, RngStream& rng);

struct AdaptResult {
  Method method = Method::kIcl;
  std::optional<ContextRepresentation> context;
  std::optional<LoraSet<float>> lora;
  std::vector<double> losses;
  double train_seconds = 0.0;
  int64_t trainable_params = 0;
  // Elements of every tensor holding a gradient buffer when each training
  // phase finished.
  int64_t census_params = 0;
  // Wall time of each optimizer step, in order.
  std::vector<double> step_seconds;
  // Attention work during training: sum of Tq * Tk over layers and heads,
  // and the per-head value of the last forward pass.
  int64_t attention_products = 0;
  int64_t attention_per_head = 0;
  InferenceContext inference;
};

// Context optimization for CT methods and prompt/prefix-tuning baselines.
// Uses `initial` when given instead of the method's own initialization.
AdaptResult adapt_context(const ModelWeights<float>& model, const DemonstrationSet& demos,
                          const AdaptConfig& config,
                          std::optional<ContextRepresentation> initial = std::nullopt,
                          const LoraSet<float>* lora = nullptr);
AdaptResult adapt_ttt(const ModelWeights<float>& model, const DemonstrationSet& demos,
                      const AdaptConfig& config);
AdaptResult compose_ttt_ctkv(const ModelWeights<float>& model, const DemonstrationSet& demos,
                             const AdaptConfig& config);
// Dispatch on config.method; ICL returns the literal context with no training.
AdaptResult adapt(const ModelWeights<float>& model, const DemonstrationSet& demos,
                  const AdaptConfig& config);

struct FisherEstimate {
  double f_k = 0.0;
  double f_v = 0.0;
  std::vector<double> layer_k;
  std::vector<double> layer_v;
};

FisherEstimate fisher_estimate(const ModelWeights<float>& model, const KVPrefix<float>& prefix,
                               const DemonstrationSet& demos, bool leave_one_out = false);

struct ParamCountInputs {
  ModelConfig model;
  int64_t context_len = 0;  // |C|
  int m = 32;
  int lora_rank = 8;
  InitScheme init = InitScheme::kRandomToken;
};

int64_t count_trainable_params(Method method, const ParamCountInputs& in);

// Training example for pair i: tokens x_i ++ y_i and per-row targets (the
// next token at y positions, -1 elsewhere).
struct PairExample {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<int64_t> rows;  // rows with a target
};
PairExample pair_example(const DemoPair& pair);

}  // namespace icolab
