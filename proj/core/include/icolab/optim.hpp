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

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "icolab/tensor.hpp"

namespace icolab {

// Cosine decay without warmup: lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)).
// total_steps <= 0 means a constant rate.
struct CosineSchedule {
  double base_lr = 1e-3;
  int64_t total_steps = 0;

  double at(int64_t t) const {
    if (total_steps <= 0) return base_lr;
    return base_lr * 0.5 *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                           static_cast<double>(total_steps)));
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  int64_t step = 0;
  CosineSchedule schedule;
  AdamHyper hyper;
};

template <class T>
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<BasicTensor<T>> params, CosineSchedule schedule, AdamHyper hyper = {})
      : params_(std::move(params)) {
    state_.schedule = schedule;
    state_.hyper = hyper;
    for (const auto& p : params_) {
      ICOLAB_REQUIRE(p.defined() && p.is_leaf() && p.requires_grad(),
                     "AdamOptimizer: parameters must be grad-requiring leaves");
      state_.first_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0);
      state_.second_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
  }

  // Allocates zeroed gradient buffers for every registered parameter.
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double current_lr() const { return state_.schedule.at(state_.step); }

  // One Adam update at lr(step), then step += 1.
  void step() {
    const double lr = current_lr();
    const auto& h = state_.hyper;
    const double t = static_cast<double>(state_.step + 1);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      ICOLAB_REQUIRE(p.has_grad(), "AdamOptimizer: registered parameter " + std::to_string(i) +
                                       " has no gradient");
      auto value = p.data();
      const auto grad = p.grad();
      auto& m = state_.first_moment[i];
      auto& v = state_.second_moment[i];
      for (size_t j = 0; j < value.size(); ++j) {
        const double g = static_cast<double>(grad[j]);
        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
        v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
        const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + h.eps);
        value[j] = static_cast<T>(static_cast<double>(value[j]) - update);
      }
    }
    ++state_.step;
  }

  const OptimizerState<T>& state() const { return state_; }
  const std::vector<BasicTensor<T>>& params() const { return params_; }

 private:
  std::vector<BasicTensor<T>> params_;
  OptimizerState<T> state_;
};

}  // namespace icolab
