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
#include <vector>

#include "icolab/rng.hpp"

namespace icolab {

// Shared token layout for every task family.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kArrow = 1;   // ends a variable-length input
  static constexpr int kStop = 2;    // ends an output; separates pairs
  static constexpr int kRowSep = 3;  // ends a grid row
  static constexpr int kInputBase = 4;
  static constexpr int kSymbols = 24;
  static constexpr int kOutputBase = kInputBase + kSymbols;
  static constexpr int kUsed = kOutputBase + kSymbols;

  static int input(int i) { return kInputBase + i; }
  static int output(int i) { return kOutputBase + i; }
  static bool is_input(int t) { return t >= kInputBase && t < kOutputBase; }
  static bool is_output(int t) { return t >= kOutputBase && t < kUsed; }
};

enum class TaskFamily { kTokenMapping, kModularAffine, kSequenceTransform, kMiniGrid };

const char* family_name(TaskFamily f);
TaskFamily family_from_name(const std::string& name);

struct TaskFamilyConfig {
  TaskFamily family = TaskFamily::kTokenMapping;
  int k = 16;
  int num_queries = 8;
  bool multiple_choice = true;
  int num_options = 4;
  // token-mapping: bijection over `mapping_subset` symbols; inputs are ordered
  // tuples of `mapping_arity` distinct symbols.
  int mapping_subset = 8;
  int mapping_arity = 2;
  // Multiple-choice distractors: any output symbols by default, or only
  // symbols from the rule's image.
  bool image_distractors = false;
  // modular-affine: numbers mod base^digits written as base-`modular_base` digits.
  int modular_base = 5;
  int modular_digits = 2;
  // sequence-transform
  int seq_alphabet = 6;
  int seq_min_len = 3;
  int seq_max_len = 5;
  // mini-grid
  int grid_min = 3;
  int grid_max = 4;
  int grid_colors = 4;  // color 0 is background

  void validate() const;
  int modulus() const;
};

// Family defaults: k = 16 for mapping/modular (multiple choice), 10 for
// sequence-transform and 3 for mini-grid (generation).
TaskFamilyConfig default_family_config(TaskFamily family);

enum class SequenceOp { kReverse, kRotate, kDuplicateLast };
enum class GridOp { kRecolor, kReflect, kCrop };

struct RuleDescriptor {
  TaskFamily family = TaskFamily::kTokenMapping;
  // mapping: symbol subset and its image (bijection subset[i] -> image[i]).
  std::vector<int> subset;
  std::vector<int> image;
  // modular-affine
  int a = 1, b = 0;
  // sequence-transform
  SequenceOp seq_op = SequenceOp::kReverse;
  int rotate_by = 1;
  // mini-grid; recolor uses `image` as the color permutation
  GridOp grid_op = GridOp::kReflect;

  // Canonical text, used for hashing and pool membership.
  std::string canonical() const;
};

enum class RulePool { kTrain, kEval };

// Deterministic partition of the rule space: a rule belongs to exactly one pool.
RulePool rule_pool(const RuleDescriptor& rule);

struct DemoPair {
  std::vector<int> x;
  std::vector<int> y;
};

struct DemonstrationSet {
  std::vector<DemoPair> pairs;

  int k() const { return static_cast<int>(pairs.size()); }
  // C = [x1; y1; ...; xk; yk].
  std::vector<int> context_tokens() const;
  // Pair index (1..k) of every context token.
  std::vector<int> segment_map() const;
  void validate() const;
};

struct QueryItem {
  std::vector<int> x;
  std::vector<int> y;
  std::vector<std::vector<int>> options;  // empty for generation families
  int answer = -1;                        // index into options
};

struct TaskInstance {
  uint64_t id = 0;
  uint64_t seed = 0;
  TaskFamilyConfig config;
  RuleDescriptor rule;
  DemonstrationSet demos;
  std::vector<QueryItem> queries;
};

// Rule sampled from `pool` (rejection sampling on the pool partition).
RuleDescriptor sample_rule(const TaskFamilyConfig& config, RngStream rng, RulePool pool);

// Fresh task: rule, query set, and demonstrations all drawn from rng.
TaskInstance gen_task(const TaskFamilyConfig& config, RngStream rng,
                      RulePool pool = RulePool::kEval);

// Same rule and queries as gen_task(config, rng), demonstrations resampled
// for `demo_seed`. Used for the per-seed evaluation protocol.
TaskInstance gen_task_seeded(const TaskFamilyConfig& config, RngStream rng, uint64_t demo_seed,
                             RulePool pool = RulePool::kEval);

// Query for input x with options drawn from rng (multiple-choice families).
QueryItem make_query(const TaskFamilyConfig& config, const RuleDescriptor& rule, std::vector<int> x,
                     RngStream& rng);

// Applies the hidden rule to a well-formed input. Throws FormatError on
// malformed input.
std::vector<int> rule_oracle(const RuleDescriptor& rule, const TaskFamilyConfig& config,
                             const std::vector<int>& x);

// One-line JSON encoding of a task (rule, demonstrations, queries).
std::string task_to_json(const TaskInstance& task);
TaskInstance task_from_json(const std::string& line);

// Grids as row-major matrices of symbol indices (0..kSymbols-1).
using Grid = std::vector<std::vector<int>>;
std::vector<int> encode_grid(const Grid& g, bool as_output);
Grid decode_grid(const std::vector<int>& tokens, bool as_output);

}  // namespace icolab
