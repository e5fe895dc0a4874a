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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "icolab/harness.hpp"
#include "icolab/ico.hpp"
#include "icolab/model.hpp"
#include "icolab/pretrain.hpp"
#include "icolab/tasks.hpp"

namespace icolab {

enum class Workflow { kPretrain, kAdapt, kEval, kAblate, kBench };

const char* workflow_name(Workflow w);
Workflow workflow_from_name(const std::string& name);

struct SuiteSpec {
  std::vector<TaskFamilyConfig> families;
  int tasks = 20;  // per family
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
};

struct RunConfig {
  Workflow workflow = Workflow::kEval;
  uint64_t seed = 0;
  std::string output_dir = "icolab-out";
  // At most one of these may be set.
  std::string checkpoint;
  std::string model_config;
  ModelConfig model;

  SuiteSpec suite;
  // One resolved configuration per method, in request order.
  std::vector<AdaptConfig> adapt;
  PretrainConfig pretrain;
  BenchConfig bench;
  ModelConfig bench_model;
  bool retrieval = false;
  bool fisher = false;
  double ablation_p_drop = 0.05;

  // Fully resolved configuration as JSON; parse_config(canonical_json())
  // reproduces the same RunConfig.
  std::string canonical_json() const;
  uint64_t hash() const;
};

// Parses a JSON run configuration. Unknown keys, a missing seed, missing
// referenced files, and conflicting keys raise ConfigError naming the key.
// Relative paths resolve against base_dir when it is non-empty.
RunConfig parse_config(const std::string& json_text, const std::string& base_dir = "");
RunConfig parse_config_file(const std::string& path);

// Runs the workflow and writes its artifacts under output_dir. Returns 0 on
// success and 1 when any hard error occurred; errors are reported on `log`.
int run_workflow(const RunConfig& config, std::ostream& log);

}  // namespace icolab
