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

#include "icolab/rng.hpp"

#include <cmath>
#include <numbers>

#include "icolab/errors.hpp"

namespace icolab {

uint64_t RngStream::mix(uint64_t z) {
  // splitmix64 finalizer
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

RngStream RngStream::split(std::string_view name) const {
  return RngStream(mix(key_ ^ mix(fnv1a64(name))), 0);
}

RngStream RngStream::split(uint64_t index) const {
  return RngStream(mix(mix(key_ + 0x3c6ef372fe94f82bULL) ^ mix(index)), 0);
}

uint64_t RngStream::next_u64() {
  const uint64_t c = counter_++;
  return mix(key_ ^ mix(c * 0xd1b54a32d192ed03ULL));
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

uint64_t RngStream::below(uint64_t n) {
  ICOLAB_REQUIRE(n > 0, "RngStream::below: n must be positive");
  // Rejection keeps the draw unbiased.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<int> RngStream::sample_without_replacement(int n, int count) {
  ICOLAB_REQUIRE(count >= 0 && count <= n, "sample_without_replacement: count out of range");
  std::vector<int> pool(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
  // Partial Fisher-Yates from the front.
  for (int i = 0; i < count; ++i) {
    const auto j = static_cast<int>(below(static_cast<uint64_t>(n - i))) + i;
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(count));
  return pool;
}

}  // namespace icolab
