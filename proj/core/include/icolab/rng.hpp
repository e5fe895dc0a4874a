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
#include <string_view>
#include <vector>

namespace icolab {

// Counter-based random stream. A stream is a (key, counter) pair; every draw
// hashes the pair, so results depend only on the key and how many values were
// drawn before, never on thread layout. Child streams are derived with split().
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  // Independent child stream; does not advance this stream.
  [[nodiscard]] RngStream split(std::string_view name) const;
  [[nodiscard]] RngStream split(uint64_t index) const;

  uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n). n must be positive.
  uint64_t below(uint64_t n);
  // Standard normal via Box-Muller; consumes two draws.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<uint64_t>(last - first);
    for (uint64_t i = n; i > 1; --i) {
      const uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  // Distinct sample of `count` values from [0, n) in draw order.
  std::vector<int> sample_without_replacement(int n, int count);

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

  static uint64_t mix(uint64_t z);

 private:
  RngStream(uint64_t key, uint64_t counter) : key_(key), counter_(counter) {}

  uint64_t key_ = 0x243f6a8885a308d3ULL;
  uint64_t counter_ = 0;
};

uint64_t fnv1a64(std::string_view s);

}  // namespace icolab
