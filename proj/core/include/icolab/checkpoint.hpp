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
#include <string>
#include <string_view>
#include <vector>

#include "icolab/ico.hpp"
#include "icolab/model.hpp"

namespace icolab {

// File layout: "ICOL", u32 version, u64 header length, header JSON, then the
// tensors as little-endian float32 in header order.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };

  ModelConfig model;
  std::vector<Entry> tensors;
  // JSON object text carried verbatim in the header ("{}" when empty).
  std::string metadata = "{}";

  const Entry* find(std::string_view name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws FormatError on a bad magic, unsupported version, truncated payload,
// or overlapping / out-of-order offsets.
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint checkpoint_from_model(const ModelWeights<float>& weights, std::string metadata = "{}");
ModelWeights<float> model_from_checkpoint(const Checkpoint& ckpt);

// Adds the trained context (soft prompt or prefix) and LoRA adapters of an
// adaptation under "context." and "lora." names.
void append_adapt_result(Checkpoint& ckpt, const AdaptResult& result);

std::string model_config_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace icolab
