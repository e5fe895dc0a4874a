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

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"

#include "icolab/checkpoint.hpp"
#include "icolab/errors.hpp"
#include "icolab/workflow.hpp"

using namespace icolab;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto p = fs::temp_directory_path() / "icolab-tests" / (std::string(info->test_suite_name()) + "." + info->name()) / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ModelConfig config(int d, int layers, int heads) {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.max_seq_len = 128;
  return c;
}

json tiny_pretrain_doc(const fs::path& out) {
  return {{"workflow", "pretrain"},
          {"seed", 3},
          {"output_dir", out.string()},
          {"model", {{"vocab_size", 64}, {"d_model", 16}, {"n_layers", 1}, {"n_heads", 2}, {"max_seq_len", 256}}},
          {"pretrain",
           {{"steps", 4},
            {"batch", 2},
            {"eval_tasks", 2},
            {"mix", {{{"family", {{"family", "token-mapping"}, {"k", 4}}}, {"weight", 1.0}}}}}}};
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto w = init_weights(config(16, 2, 2), RngStream(8));
  const auto ck = checkpoint_from_model(w, R"({"note":"x"})");
  const std::string bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "ICOL");
  const auto back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(json::parse(back.metadata)["note"], "x");
  ASSERT_NE(back.find("tok_emb"), nullptr);
  EXPECT_EQ(back.find("nope"), nullptr);
}

TEST(Checkpoint, CorruptFilesRaiseFormatError) {
  const std::string bytes = serialize_checkpoint(checkpoint_from_model(init_weights(config(16, 1, 2), RngStream(1))));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 4)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 20)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes + "tail"), FormatError);
  EXPECT_THROW(load_checkpoint((fs::temp_directory_path() / "icolab-no-such-file.ckpt").string()), FormatError);
}

TEST(Checkpoint, ReloadedModelReplaysLogitsExactly) {
  const auto w = init_weights(config(64, 4, 4), RngStream(12));
  const auto path = scratch("m.ckpt");
  save_checkpoint(checkpoint_from_model(w), path.string());
  const auto r = model_from_checkpoint(load_checkpoint(path.string()));
  std::vector<int> tokens;
  RngStream rng(2);
  for (int i = 0; i < 40; ++i) tokens.push_back(static_cast<int>(rng.below(64)));
  const auto a = forward_lm(w, tokens).values();
  const auto b = forward_lm(r, tokens).values();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a, b);
  EXPECT_EQ(model_config_json(r.config), model_config_json(w.config));
}

TEST(Config, RejectsUnknownKeysMissingSeedAndConflicts) {
  auto expect_error = [](const json& j, const std::string& needle) {
    try {
      parse_config(j.dump());
      ADD_FAILURE() << "accepted " << j.dump();
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error({{"workflow", "eval"}, {"seed", 1}, {"colour", 2}}, "colour");
  expect_error({{"workflow", "eval"}}, "seed");
  expect_error({{"workflow", "nope"}, {"seed", 1}}, "nope");
  expect_error({{"workflow", "eval"}, {"seed", 1}, {"method", "icl"}, {"methods", {"ct-kv"}}}, "method");
  expect_error({{"workflow", "eval"}, {"seed", 1}, {"checkpoint", "/nonexistent/x.ckpt"}}, "checkpoint");
  expect_error({{"workflow", "eval"}, {"seed", 1}, {"methods", {"ct-kv"}}, {"adapt", {{"lrr", 1}}}}, "lrr");
  expect_error({{"workflow", "eval"}, {"seed", 1}, {"suite", {{"families", {{{"family", "token-mapping"}, {"kk", 2}}}}}}},
               "kk");
  expect_error({{"workflow", "bench"}, {"seed", 1}, {"bench", {{"repeats", 2}}}}, "repeats");
  EXPECT_THROW(parse_config("{not json"), ConfigError);
}

TEST(Config, CanonicalJsonRoundTripsAndHashIgnoresOutputDir) {
  json j = {{"workflow", "eval"},
            {"seed", 9},
            {"output_dir", "a"},
            {"methods", {"icl", "ct-kv"}},
            {"adapt", {{"iterations", 7}}},
            {"suite", {{"families", {"token-mapping"}}, {"tasks", 3}, {"seeds", {1, 2}}}}};
  const auto c = parse_config(j.dump());
  ASSERT_EQ(c.adapt.size(), 2u);
  EXPECT_EQ(c.adapt[1].iterations, 7);
  const auto again = parse_config(c.canonical_json());
  EXPECT_EQ(again.canonical_json(), c.canonical_json());
  EXPECT_EQ(again.hash(), c.hash());
  j["output_dir"] = "b";
  EXPECT_EQ(parse_config(j.dump()).hash(), c.hash());
  j["seed"] = 10;
  EXPECT_NE(parse_config(j.dump()).hash(), c.hash());
}

TEST(Workflow, PretrainRerunIsByteIdentical) {
  const auto a = scratch("a"), b = scratch("b");
  std::ostringstream log;
  ASSERT_EQ(run_workflow(parse_config(tiny_pretrain_doc(a).dump()), log), 0) << log.str();
  ASSERT_EQ(run_workflow(parse_config(tiny_pretrain_doc(b).dump()), log), 0) << log.str();
  EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
  EXPECT_EQ(slurp(a / "pretrain.json"), slurp(b / "pretrain.json"));
  EXPECT_TRUE(fs::exists(a / "timing.json"));

  // Eval from that checkpoint, twice.
  auto eval_doc = [&](const fs::path& out) {
    return json{{"workflow", "eval"},
                {"seed", 4},
                {"output_dir", out.string()},
                {"checkpoint", (a / "model.ckpt").string()},
                {"methods", {"icl", "ct-kv"}},
                {"adapt", {{"iterations", 2}}},
                {"suite", {{"families", {{{"family", "token-mapping"}, {"k", 4}}}}, {"tasks", 2}, {"seeds", {0, 1}}}}};
  };
  const auto e1 = scratch("e1"), e2 = scratch("e2");
  ASSERT_EQ(run_workflow(parse_config(eval_doc(e1).dump()), log), 0) << log.str();
  ASSERT_EQ(run_workflow(parse_config(eval_doc(e2).dump()), log), 0) << log.str();
  int compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(e1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), e1);
    if (rel.string().starts_with("timing") || rel == "config.json") continue;
    EXPECT_EQ(slurp(entry.path()), slurp(e2 / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 1);
}

TEST(Workflow, MissingCheckpointIsReportedNotThrown) {
  json j = tiny_pretrain_doc(scratch("p"));
  j["workflow"] = "eval";
  j.erase("pretrain");
  std::ostringstream log;
  EXPECT_EQ(run_workflow(parse_config(j.dump()), log), 1);
  EXPECT_NE(log.str().find("checkpoint"), std::string::npos) << log.str();
}
