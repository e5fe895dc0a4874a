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

#include "icolab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"

#include "icolab/errors.hpp"

namespace icolab {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'I', 'C', 'O', 'L'};

template <class U>
void put_le(std::string& out, U v) {
  for (size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(std::string_view in, size_t at) {
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

json model_obj(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"ffn_mult", c.ffn_mult},
          {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps},   {"positional", c.positional}};
}

ModelConfig model_from(const json& j) {
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "vocab_size") c.vocab_size = v.get<int>();
    else if (key == "d_model") c.d_model = v.get<int>();
    else if (key == "n_layers") c.n_layers = v.get<int>();
    else if (key == "n_heads") c.n_heads = v.get<int>();
    else if (key == "max_seq_len") c.max_seq_len = v.get<int>();
    else if (key == "ffn_mult") c.ffn_mult = v.get<int>();
    else if (key == "rope_base") c.rope_base = v.get<double>();
    else if (key == "norm_eps") c.norm_eps = v.get<double>();
    else if (key == "positional") c.positional = v.get<std::string>();
    else throw ConfigError("model config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

}  // namespace

const Checkpoint::Entry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : tensors)
    if (e.name == name) return &e;
  return nullptr;
}

std::string model_config_json(const ModelConfig& c) { return model_obj(c).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return model_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json dir = json::array();
  uint64_t offset = 0;
  for (const auto& e : ckpt.tensors) {
    ICOLAB_REQUIRE(static_cast<int64_t>(e.data.size()) == shape_numel(e.shape),
                   "checkpoint tensor '" + e.name + "' has the wrong element count");
    const uint64_t bytes = e.data.size() * sizeof(float);
    dir.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  const json header = {{"model", model_obj(ckpt.model)}, {"tensors", dir}, {"metadata", meta}};
  const std::string head = header.dump();

  std::string out(kMagic, 4);
  put_le<uint32_t>(out, Checkpoint::kVersion);
  put_le<uint64_t>(out, head.size());
  out += head;
  out.reserve(out.size() + offset);
  for (const auto& e : ckpt.tensors) {
    for (float f : e.data) put_le<uint32_t>(out, std::bit_cast<uint32_t>(f));
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic (not an ICOL file)");
  const auto version = get_le<uint32_t>(bytes, 4);
  if (version != Checkpoint::kVersion)
    throw FormatError("checkpoint: format version " + std::to_string(version) + " is not supported by this build (reads " +
                      std::to_string(Checkpoint::kVersion) + "); convert it with a matching release first");
  const auto head_len = get_le<uint64_t>(bytes, 8);
  if (head_len > bytes.size() - 16) throw FormatError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(16, head_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  const std::string_view payload = bytes.substr(16 + head_len);

  Checkpoint ck;
  try {
    ck.model = model_from(header.at("model"));
    ck.metadata = header.at("metadata").dump();
    uint64_t expected = 0;
    std::set<std::string> names;
    for (const auto& t : header.at("tensors")) {
      Checkpoint::Entry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      const auto off = t.at("offset").get<uint64_t>();
      const auto len = t.at("bytes").get<uint64_t>();
      if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor '" + e.name + "'");
      if (off != expected)
        throw FormatError("checkpoint: tensor '" + e.name + "' offset " + std::to_string(off) +
                          (off < expected ? " overlaps the previous tensor" : " leaves a gap"));
      if (len != static_cast<uint64_t>(shape_numel(e.shape)) * sizeof(float))
        throw FormatError("checkpoint: tensor '" + e.name + "' byte length does not match its shape");
      if (off + len > payload.size()) throw FormatError("checkpoint: truncated payload at tensor '" + e.name + "'");
      e.data.resize(len / sizeof(float));
      for (size_t i = 0; i < e.data.size(); ++i)
        e.data[i] = std::bit_cast<float>(get_le<uint32_t>(payload, off + i * sizeof(float)));
      expected = off + len;
      ck.tensors.push_back(std::move(e));
    }
    if (expected != payload.size())
      throw FormatError("checkpoint: payload holds " + std::to_string(payload.size()) + " bytes, directory describes " +
                        std::to_string(expected));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("checkpoint: cannot write '" + tmp + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("checkpoint: write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("checkpoint: cannot move into '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

Checkpoint checkpoint_from_model(const ModelWeights<float>& weights, std::string metadata) {
  Checkpoint ck;
  ck.model = weights.config;
  ck.metadata = std::move(metadata);
  for (const auto& [name, t] : weights.named()) ck.tensors.push_back({name, t.shape(), t.values()});
  return ck;
}

ModelWeights<float> model_from_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, Tensor>> named;
  for (const auto& e : ckpt.tensors)
    if (e.name.rfind("context.", 0) != 0 && e.name.rfind("lora.", 0) != 0)
      named.emplace_back(e.name, Tensor::from(e.shape, e.data));
  return weights_from_named(ckpt.model, named);
}

void append_adapt_result(Checkpoint& ckpt, const AdaptResult& result) {
  auto add = [&](const std::string& name, const Tensor& t) { ckpt.tensors.push_back({name, t.shape(), t.values()}); };
  const auto& inf = result.inference;
  if (inf.prompt) add("context.prompt", inf.prompt->rows);
  if (inf.prefix) {
    for (size_t l = 0; l < inf.prefix->layers.size(); ++l) {
      add("context.prefix." + std::to_string(l) + ".keys", inf.prefix->layers[l].keys);
      add("context.prefix." + std::to_string(l) + ".values", inf.prefix->layers[l].values);
    }
  }
  if (inf.lora) {
    for (const auto& a : inf.lora->adapters) {
      const auto p = "lora." + std::to_string(a.layer) + "." + lora_target_name(a.target);
      add(p + ".a", a.a);
      add(p + ".b", a.b);
    }
  }
}

}  // namespace icolab
