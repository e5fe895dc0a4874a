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

#include "icolab/gradcheck.hpp"

#include <cmath>
#include <string>

namespace icolab {
namespace {

double evaluate(const ScalarFunction64& f, const std::vector<Tensor64>& params) {
  GradientTape<double> tape;
  const Tensor64 out = f(tape, params);
  ICOLAB_REQUIRE(out.numel() == 1, "finite_diff_check: function must return a scalar");
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarFunction64& f, const std::vector<Tensor64>& point,
                                  double h) {
  ICOLAB_REQUIRE(h > 0.0, "finite_diff_check: step must be positive");
  std::vector<Tensor64> params;
  params.reserve(point.size());
  for (const auto& p : point) params.push_back(Tensor64::from(p.shape(), p.values(), true));

  std::vector<std::vector<double>> analytic(params.size());
  {
    GradientTape<double> tape;
    const Tensor64 out = f(tape, params);
    ICOLAB_REQUIRE(out.numel() == 1, "finite_diff_check: function must return a scalar");
    if (!std::isfinite(out.item())) throw NumericError("finite_diff_check: non-finite value");
    if (tape.contains(out)) {
      tape.backward(out);
    }
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i].has_grad()) {
        analytic[i].assign(params[i].grad().begin(), params[i].grad().end());
      } else {
        analytic[i].assign(static_cast<size_t>(params[i].numel()), 0.0);  // not reached by f
      }
    }
  }

  GradCheckReport report;
  for (size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].data();
    for (int64_t j = 0; j < params[i].numel(); ++j) {
      const double saved = values[static_cast<size_t>(j)];
      values[static_cast<size_t>(j)] = saved + h;
      const double up = evaluate(f, params);
      values[static_cast<size_t>(j)] = saved - h;
      const double down = evaluate(f, params);
      values[static_cast<size_t>(j)] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][static_cast<size_t>(j)];
      const double err = std::abs(a - numeric) / (std::abs(a) + 1e-8);
      if (err > report.max_relative_error) {
        report = {err, i, j, a, numeric};
      }
    }
  }
  return report;
}

}  // namespace icolab
