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

#include <string>
#include <utility>
#include <vector>

#include "icolab/rng.hpp"
#include "icolab/tensor.hpp"

namespace icolab {

// Shape metadata for the decoder-only transformer. Architecture choices that
// are fixed: pre-norm blocks, RMSNorm, GELU feed-forward with ffn_mult
// expansion, rotary positions, no biases, untied unembedding.
struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int max_seq_len = 512;
  int ffn_mult = 4;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  std::string positional = "rope";

  int d_head() const { return d_model / n_heads; }
  int d_ffn() const { return d_model * ffn_mult; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LayerWeights {
  BasicTensor<T> attn_norm;  // [d]
  BasicTensor<T> wq, wk, wv, wo;  // [d, d], stored [out, in]
  BasicTensor<T> ffn_norm;   // [d]
  BasicTensor<T> w_up;       // [ffn, d]
  BasicTensor<T> w_down;     // [d, ffn]
};

template <class T>
struct ModelWeights {
  ModelConfig config;
  BasicTensor<T> tok_emb;  // [V, d]
  std::vector<LayerWeights<T>> layers;
  BasicTensor<T> final_norm;  // [d]
  BasicTensor<T> unembed;     // [V, d]

  // Stable (name, tensor) listing; the order is the checkpoint order.
  std::vector<std::pair<std::string, BasicTensor<T>>> named() const;
  void set_requires_grad(bool on);
  // Deep copy, optionally converted to another precision.
  template <class U>
  ModelWeights<U> cast() const;
  ModelWeights clone() const { return cast<T>(); }
  int64_t parameter_count() const;
};

// Embeddings ~ N(0, 1); projections ~ N(0, 1/fan_in), with the residual
// output projections further scaled by 1/sqrt(2L); norm gains = 1.
ModelWeights<float> init_weights(const ModelConfig& config, RngStream rng);

// Rebuilds weights from named tensors (as produced by named()).
template <class T>
ModelWeights<T> weights_from_named(const ModelConfig& config,
                                   const std::vector<std::pair<std::string, BasicTensor<T>>>& named);

template <class T>
template <class U>
ModelWeights<U> ModelWeights<T>::cast() const {
  ModelWeights<U> out;
  out.config = config;
  auto c = [](const BasicTensor<T>& t) {
    auto r = t.template cast<U>();
    r.set_requires_grad(false);
    return r;
  };
  out.tok_emb = c(tok_emb);
  for (const auto& l : layers) {
    out.layers.push_back({c(l.attn_norm), c(l.wq), c(l.wk), c(l.wv), c(l.wo), c(l.ffn_norm),
                          c(l.w_up), c(l.w_down)});
  }
  out.final_norm = c(final_norm);
  out.unembed = c(unembed);
  return out;
}

}  // namespace icolab
