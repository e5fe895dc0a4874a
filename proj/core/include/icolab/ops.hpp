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
#include <span>
#include <vector>

#include "icolab/tensor.hpp"

// Differentiable kernels. Every kernel checks shapes at its boundary, records a
// backward rule on the tape when any input requires gradients, and raises
// NumericError naming itself if it produces a non-finite value. There is no
// implicit broadcasting; scalars enter only through scale().
namespace icolab::ops {

template <class T>
using Tape = GradientTape<T>;

// a: [M,K] or [B,M,K]; b: [K,N] / [B,K,N], or [N,K] / [B,N,K] when transpose_b.
template <class T>
BasicTensor<T> matmul(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b,
                      bool transpose_b = false);

template <class T>
BasicTensor<T> add(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> mul(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> scale(Tape<T>& tape, const BasicTensor<T>& a, T factor);

// x: [M,N], bias: [N]; adds bias to every row.
template <class T>
BasicTensor<T> add_bias(Tape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& bias);

// Softmax over the last axis.
template <class T>
BasicTensor<T> softmax(Tape<T>& tape, const BasicTensor<T>& x);

// x: [M,N], gain: [N].
template <class T>
BasicTensor<T> rmsnorm(Tape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& gain,
                       T eps = T(1e-5));

// tanh-approximated GELU.
template <class T>
BasicTensor<T> gelu(Tape<T>& tape, const BasicTensor<T>& x);

template <class T>
BasicTensor<T> tanh(Tape<T>& tape, const BasicTensor<T>& x);

// table: [V,D]; returns [ids.size(), D].
template <class T>
BasicTensor<T> embedding(Tape<T>& tape, const BasicTensor<T>& table, std::span<const int> ids);

enum class Reduction { kSum, kMean };

// logits: [M,V]; targets: M entries, -1 marks an ignored row. Returns the
// scalar negative log-likelihood over non-ignored rows.
template <class T>
BasicTensor<T> cross_entropy(Tape<T>& tape, const BasicTensor<T>& logits,
                             std::span<const int> targets, Reduction reduction = Reduction::kSum);

template <class T>
BasicTensor<T> concat(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b, int axis);

// x: [..., Tq, Tk]; hidden: Tq*Tk flags (1 = hidden), shared by every leading index.
template <class T>
BasicTensor<T> masked_fill(Tape<T>& tape, const BasicTensor<T>& x, std::span<const uint8_t> hidden,
                           T fill_value);

// [T, H*Dh] -> [H, T, Dh]
template <class T>
BasicTensor<T> split_heads(Tape<T>& tape, const BasicTensor<T>& x, int64_t n_heads);

// [H, T, Dh] -> [T, H*Dh]
template <class T>
BasicTensor<T> merge_heads(Tape<T>& tape, const BasicTensor<T>& x);

// Rotary position encoding on x: [H, T, Dh] with one absolute position per row.
// Rotates the pairs (i, i + Dh/2).
template <class T>
BasicTensor<T> rope(Tape<T>& tape, const BasicTensor<T>& x, std::span<const int64_t> positions,
                    double base);

// Picks entries of the second-to-last axis: [..., R, C] -> [..., idx.size(), C].
template <class T>
BasicTensor<T> select_rows(Tape<T>& tape, const BasicTensor<T>& x, std::span<const int64_t> rows);

template <class T>
BasicTensor<T> sum(Tape<T>& tape, const BasicTensor<T>& x);

template <class T>
BasicTensor<T> reshape(Tape<T>& tape, const BasicTensor<T>& x, Shape shape);

// Non-differentiable helpers.

// Per-row negative log-likelihood of logits [M,V] at targets (-1 -> 0).
template <class T>
std::vector<double> row_nll(const BasicTensor<T>& logits, std::span<const int> targets);

// Attention multiply counter: query rows x key rows, summed over heads and
// layers. Incremented by forward passes that are handed a counter.
struct AttentionCounter {
  int64_t query_key_products = 0;  // sum over (layer, head) of Tq * Tk
  int64_t per_head_last = 0;       // Tq * Tk of the most recent head
  void add(int64_t heads, int64_t tq, int64_t tk) {
    per_head_last = tq * tk;
    query_key_products += heads * tq * tk;
  }
};

}  // namespace icolab::ops
