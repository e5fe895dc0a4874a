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

#include <functional>
#include <vector>

#include "icolab/tensor.hpp"

namespace icolab {

// Builds a scalar on the given tape from the parameter tensors.
using ScalarFunction64 =
    std::function<Tensor64(GradientTape<double>& tape, const std::vector<Tensor64>& params)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  size_t worst_param = 0;
  int64_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Compares reverse-mode gradients against central differences in 64-bit:
// max over coordinates of |analytic - numeric| / (|analytic| + 1e-8).
// Throws NumericError if f is non-finite at any probe.
GradCheckReport finite_diff_check(const ScalarFunction64& f, const std::vector<Tensor64>& point,
                                  double h = 1e-3);

}  // namespace icolab
