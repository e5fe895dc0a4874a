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

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "icolab/errors.hpp"

namespace icolab {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

template <class T>
class GradientTape;

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient is written
  bool requires_grad = false;
  const GradientTape<T>* tape = nullptr;  // set for recorded (non-leaf) nodes
  size_t tape_index = 0;
};

// Shared handle to a dense row-major array. Copies alias the same storage;
// use clone() for an independent buffer.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    auto node = std::make_shared<TensorNode<T>>();
    ICOLAB_REQUIRE(std::all_of(shape.begin(), shape.end(), [](int64_t e) { return e >= 0; }),
                   "tensor extents must be non-negative");
    node->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
  }

  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    ICOLAB_REQUIRE(static_cast<int64_t>(values.size()) == shape_numel(shape),
                   "element count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
  }

  static BasicTensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t i) const {
    if (i < 0) i += rank();
    ICOLAB_REQUIRE(i >= 0 && i < rank(), "dim index out of range");
    return node_->shape[static_cast<size_t>(i)];
  }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  // Allocates (or clears) the gradient buffer to zeros.
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void drop_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    ICOLAB_REQUIRE(node_->tape == nullptr, "requires_grad can only be changed on leaf tensors");
    node_->requires_grad = on;
    if (!on) drop_grad();
  }
  bool is_leaf() const { return node_->tape == nullptr; }

  T item() const {
    ICOLAB_REQUIRE(node_->value.size() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }
  T at(int64_t flat) const { return node_->value.at(static_cast<size_t>(flat)); }

  // Independent leaf with copied values and the same requires_grad flag.
  BasicTensor clone() const {
    return from(node_->shape, node_->value, node_->requires_grad);
  }
  // Leaf sharing nothing with the tape; requires_grad off.
  BasicTensor detach() const { return from(node_->shape, node_->value, false); }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return BasicTensor<U>::from(node_->shape, std::move(out), node_->requires_grad);
  }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& shared_node() const { return node_; }
  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Ordered record of differentiable operations. Only operations with at least
// one grad-requiring input are recorded; everything else is plain compute.
template <class T>
class GradientTape {
 public:
  using Node = TensorNode<T>;
  // Reads out.grad and accumulates into inputs' grads (via accumulate_grad).
  using BackwardFn = std::function<void(const Node& out, std::span<Node* const> inputs)>;

  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Registers `out` as produced from `inputs`. Returns true if recorded.
  bool record(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> inputs,
              BackwardFn fn);

  // Fills .grad of every grad-requiring tensor reachable from `loss`.
  // Gradients from a previous call on the same tape are overwritten, so
  // repeated calls yield identical results.
  void backward(const BasicTensor<T>& loss);

  size_t size() const { return entries_.size(); }
  bool contains(const BasicTensor<T>& t) const {
    return t.defined() && t.node()->tape == this && t.node()->tape_index < entries_.size() &&
           entries_[t.node()->tape_index].out.get() == t.node();
  }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<Node> out;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

// Gradient buffer of `n` (allocated to zeros on first use), or an empty span
// when n does not require gradients.
template <class T>
std::span<T> accumulate_grad(TensorNode<T>* n) {
  if (n == nullptr || !n->requires_grad) return {};
  if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
  return n->grad;
}

template <class T>
bool GradientTape<T>::record(const std::shared_ptr<Node>& out,
                             std::vector<std::shared_ptr<Node>> inputs, BackwardFn fn) {
  bool any = false;
  for (const auto& in : inputs) any = any || (in && in->requires_grad);
  if (!any) return false;
  out->requires_grad = true;
  out->tape = this;
  out->tape_index = entries_.size();
  entries_.push_back(Entry{out, std::move(inputs), std::move(fn)});
  return true;
}

template <class T>
void GradientTape<T>::backward(const BasicTensor<T>& loss) {
  ICOLAB_REQUIRE(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar tensor");
  ICOLAB_REQUIRE(contains(loss), "backward: loss tensor was not recorded on this tape");
  const size_t last = loss.node()->tape_index;
  std::unordered_set<const Node*> cleared;
  for (size_t i = 0; i <= last; ++i) {
    auto& e = entries_[i];
    e.out->grad.clear();
    for (const auto& in : e.inputs) {
      if (in && in->requires_grad && in->tape == nullptr && cleared.insert(in.get()).second) {
        in->grad.assign(in->value.size(), T(0));
      }
    }
  }
  loss.node()->grad.assign(1, T(1));
  std::vector<Node*> raw;
  for (size_t i = last + 1; i-- > 0;) {
    auto& e = entries_[i];
    if (e.out->grad.empty()) continue;
    raw.clear();
    for (const auto& in : e.inputs) raw.push_back(in.get());
    e.fn(*e.out, raw);
  }
}

}  // namespace icolab
