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

#include "icolab/model.hpp"

#include <cmath>
#include <map>

namespace icolab {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("ModelConfig: " + m); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) fail("d_model, n_layers, n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_head() % 2 != 0) fail("head dimension must be even for rotary encoding");
  if (max_seq_len <= 0) fail("max_seq_len must be positive");
  if (ffn_mult <= 0) fail("ffn_mult must be positive");
  if (positional != "rope") fail("unsupported positional scheme '" + positional + "'");
}

template <class T>
std::vector<std::pair<std::string, BasicTensor<T>>> ModelWeights<T>::named() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  out.emplace_back("tok_emb", tok_emb);
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    const auto& l = layers[i];
    out.emplace_back(p + "attn_norm", l.attn_norm);
    out.emplace_back(p + "wq", l.wq);
    out.emplace_back(p + "wk", l.wk);
    out.emplace_back(p + "wv", l.wv);
    out.emplace_back(p + "wo", l.wo);
    out.emplace_back(p + "ffn_norm", l.ffn_norm);
    out.emplace_back(p + "w_up", l.w_up);
    out.emplace_back(p + "w_down", l.w_down);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("unembed", unembed);
  return out;
}

template <class T>
void ModelWeights<T>::set_requires_grad(bool on) {
  for (auto& [name, t] : named()) {
    auto copy = t;
    copy.set_requires_grad(on);
  }
}

template <class T>
int64_t ModelWeights<T>::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

ModelWeights<float> init_weights(const ModelConfig& config, RngStream rng) {
  config.validate();
  const int64_t d = config.d_model, v = config.vocab_size, f = config.d_ffn();
  auto normal = [](RngStream& r, Shape s, double sd) {
    std::vector<float> vals(static_cast<size_t>(shape_numel(s)));
    for (auto& x : vals) x = static_cast<float>(r.normal() * sd);
    return Tensor::from(std::move(s), std::move(vals));
  };
  auto ones = [](int64_t n) {
    return Tensor::from({n}, std::vector<float>(static_cast<size_t>(n), 1.0f));
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double res = 1.0 / std::sqrt(2.0 * config.n_layers);
  ModelWeights<float> w;
  w.config = config;
  RngStream emb = rng.split("tok_emb");
  w.tok_emb = normal(emb, {v, d}, 1.0);
  for (int i = 0; i < config.n_layers; ++i) {
    RngStream lr = rng.split("layer").split(static_cast<uint64_t>(i));
    LayerWeights<float> l;
    l.attn_norm = ones(d);
    l.wq = normal(lr, {d, d}, sd);
    l.wk = normal(lr, {d, d}, sd);
    l.wv = normal(lr, {d, d}, sd);
    l.wo = normal(lr, {d, d}, sd * res);
    l.ffn_norm = ones(d);
    l.w_up = normal(lr, {f, d}, sd);
    l.w_down = normal(lr, {d, f}, res / std::sqrt(static_cast<double>(f)));
    w.layers.push_back(std::move(l));
  }
  w.final_norm = ones(d);
  RngStream un = rng.split("unembed");
  w.unembed = normal(un, {v, d}, sd);
  return w;
}

template <class T>
ModelWeights<T> weights_from_named(const ModelConfig& config,
                                   const std::vector<std::pair<std::string, BasicTensor<T>>>& named) {
  config.validate();
  std::map<std::string, BasicTensor<T>> by_name(named.begin(), named.end());
  const int64_t d = config.d_model, v = config.vocab_size, f = config.d_ffn();
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                        ", expected " + shape_str(shape));
    }
    return it->second;
  };
  ModelWeights<T> w;
  w.config = config;
  w.tok_emb = take("tok_emb", {v, d});
  for (int i = 0; i < config.n_layers; ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    w.layers.push_back({take(p + "attn_norm", {d}), take(p + "wq", {d, d}),
                        take(p + "wk", {d, d}), take(p + "wv", {d, d}), take(p + "wo", {d, d}),
                        take(p + "ffn_norm", {d}), take(p + "w_up", {f, d}),
                        take(p + "w_down", {d, f})});
  }
  w.final_norm = take("final_norm", {d});
  w.unembed = take("unembed", {v, d});
  return w;
}

template struct ModelWeights<float>;
template struct ModelWeights<double>;
template ModelWeights<float> weights_from_named(
    const ModelConfig&, const std::vector<std::pair<std::string, BasicTensor<float>>>&);
template ModelWeights<double> weights_from_named(
    const ModelConfig&, const std::vector<std::pair<std::string, BasicTensor<double>>>&);

}  // namespace icolab
