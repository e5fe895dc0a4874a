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

// icolab: command-line entry point for the pretrain, adapt, eval, ablate,
// bench and inspect workflows.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "icolab/checkpoint.hpp"
#include "icolab/errors.hpp"
#include "icolab/workflow.hpp"

namespace {

using json = nlohmann::ordered_json;

struct Flags {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> output_dir, checkpoint, model_config;
  std::vector<std::string> families, methods;
  std::optional<int> tasks, k;
  std::vector<uint64_t> seeds;
  // adapt
  std::optional<double> lr, p_drop, ttt_lr;
  std::optional<int> iterations, m, batch, ttt_iterations, ttt_batch, lora_rank;
  std::optional<bool> loo;
  std::optional<std::string> init;
  // pretrain
  std::optional<int> steps, pretrain_batch;
  std::optional<double> pretrain_lr;
  // bench
  std::vector<int> k_grid;
  std::optional<int> ell, repeats;
  bool retrieval = false, fisher = false, print_config = false;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("-c,--config", f.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "master seed (required here or in the config)");
  app->add_option("-o,--output-dir", f.output_dir, "artifact directory");
  app->add_flag("--print-config", f.print_config, "print the resolved configuration and exit");
}

void add_model(CLI::App* app, Flags& f) { app->add_option("--checkpoint", f.checkpoint, "model checkpoint"); }

void add_suite(CLI::App* app, Flags& f) {
  app->add_option("--family", f.families, "task family (repeatable)");
  app->add_option("--tasks", f.tasks, "tasks per family");
  app->add_option("--k", f.k, "demonstration pairs per task");
  app->add_option("--seeds", f.seeds, "demonstration seeds");
}

void add_adapt(CLI::App* app, Flags& f) {
  app->add_option("--method", f.methods, "method (repeatable)");
  app->add_option("--lr", f.lr, "context learning rate");
  app->add_option("--iterations", f.iterations, "context optimization steps");
  app->add_option("--p-drop", f.p_drop, "token dropout probability");
  app->add_option("--loo", f.loo, "leave-one-out masking (true/false)");
  app->add_option("--init", f.init, "baseline init: demo-tokens, random-token, uniform, mlp");
  app->add_option("--m", f.m, "baseline / CT-Prefix length");
  app->add_option("--batch", f.batch, "pairs per step (0 = all)");
  app->add_option("--ttt-lr", f.ttt_lr, "LoRA learning rate");
  app->add_option("--ttt-iterations", f.ttt_iterations, "LoRA steps");
  app->add_option("--ttt-batch", f.ttt_batch, "leave-one-out pairs per LoRA step (0 = all)");
  app->add_option("--lora-rank", f.lora_rank, "LoRA rank");
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Config file first, then flags on top. A flag that contradicts the
// subcommand is an error rather than an override.
json merged(const std::string& workflow, const Flags& f) {
  json j = json::object();
  if (!f.config_path.empty()) {
    try {
      j = json::parse(slurp(f.config_path));
    } catch (const json::exception& e) {
      throw icolab::ConfigError(f.config_path + ": " + e.what());
    }
    const auto base = std::filesystem::path(f.config_path).parent_path();
    for (const char* key : {"checkpoint", "model_config"}) {
      if (j.contains(key) && j[key].is_string()) {
        std::filesystem::path p = j[key].get<std::string>();
        if (p.is_relative()) j[key] = (base / p).string();
      }
    }
    if (j.contains("workflow") && j["workflow"] != workflow)
      throw icolab::ConfigError("config workflow '" + j["workflow"].get<std::string>() + "' conflicts with subcommand '" +
                                workflow + "'");
  }
  j["workflow"] = workflow;
  if (f.seed) j["seed"] = *f.seed;
  if (f.output_dir) j["output_dir"] = *f.output_dir;
  if (f.checkpoint) j["checkpoint"] = *f.checkpoint;
  if (f.model_config) j["model_config"] = *f.model_config;

  auto sub = [&](const char* key) -> json& {
    if (!j.contains(key)) j[key] = json::object();
    return j[key];
  };
  if (!f.families.empty() || f.k) {
    std::vector<std::string> names = f.families;
    if (names.empty() && j.contains("suite") && j["suite"].contains("families"))
      for (const auto& fam : j["suite"]["families"]) names.push_back(fam.is_string() ? fam.get<std::string>() : fam["family"].get<std::string>());
    if (names.empty()) names.push_back("token-mapping");
    json fams = json::array();
    for (const auto& n : names) {
      json o = {{"family", n}};
      if (f.k) o["k"] = *f.k;
      fams.push_back(o);
    }
    sub("suite")["families"] = fams;
  }
  if (f.tasks) sub("suite")["tasks"] = *f.tasks;
  if (!f.seeds.empty()) sub("suite")["seeds"] = f.seeds;
  if (!f.methods.empty()) {
    if (j.contains("method")) j.erase("method");
    j["methods"] = f.methods;
  }
  if (f.lr) sub("adapt")["lr"] = *f.lr;
  if (f.iterations) sub("adapt")["iterations"] = *f.iterations;
  if (f.p_drop) sub("adapt")["p_drop"] = *f.p_drop;
  if (f.loo) sub("adapt")["leave_one_out"] = *f.loo;
  if (f.init) sub("adapt")["init"] = *f.init;
  if (f.m) sub("adapt")["m"] = *f.m;
  if (f.batch) sub("adapt")["batch"] = *f.batch;
  if (f.ttt_lr) sub("adapt")["ttt_lr"] = *f.ttt_lr;
  if (f.ttt_iterations) sub("adapt")["ttt_iterations"] = *f.ttt_iterations;
  if (f.ttt_batch) sub("adapt")["ttt_batch"] = *f.ttt_batch;
  if (f.lora_rank) sub("adapt")["lora_rank"] = *f.lora_rank;
  if (f.steps) sub("pretrain")["steps"] = *f.steps;
  if (f.pretrain_batch) sub("pretrain")["batch"] = *f.pretrain_batch;
  if (f.pretrain_lr) sub("pretrain")["lr"] = *f.pretrain_lr;
  if (!f.k_grid.empty()) sub("bench")["k_grid"] = f.k_grid;
  if (f.ell) sub("bench")["ell"] = *f.ell;
  if (f.repeats) sub("bench")["repeats"] = *f.repeats;
  if (f.retrieval) j["retrieval"] = true;
  if (f.fisher) j["fisher"] = true;
  return j;
}

int inspect(const std::string& path) {
  const auto ck = icolab::load_checkpoint(path);
  std::cout << "model " << icolab::model_config_json(ck.model) << "\n";
  std::cout << "metadata " << ck.metadata << "\n";
  uint64_t offset = 0;
  for (const auto& e : ck.tensors) {
    std::cout << e.name << " " << icolab::shape_str(e.shape) << " offset " << offset << " bytes "
              << e.data.size() * sizeof(float) << "\n";
    offset += e.data.size() * sizeof(float);
  }
  std::cout << ck.tensors.size() << " tensors, " << offset << " payload bytes\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"icolab: in-context optimization experiments on a desk-scale transformer"};
  app.require_subcommand(1);
  Flags f;
  std::string inspect_path;

  auto* pretrain = app.add_subcommand("pretrain", "meta-pretrain a model and write a checkpoint");
  add_common(pretrain, f);
  pretrain->add_option("--model-config", f.model_config, "model config JSON")->check(CLI::ExistingFile);
  pretrain->add_option("--steps", f.steps, "optimizer steps");
  pretrain->add_option("--batch", f.pretrain_batch, "tasks per step");
  pretrain->add_option("--lr", f.pretrain_lr, "peak learning rate");

  auto* adapt = app.add_subcommand("adapt", "adapt contexts or adapters and save them");
  auto* eval = app.add_subcommand("eval", "evaluate methods on a task suite");
  auto* ablate = app.add_subcommand("ablate", "leave-one-out / token dropout ablation for CT-KV");
  for (auto* s : {adapt, eval, ablate}) {
    add_common(s, f);
    add_model(s, f);
    add_suite(s, f);
    add_adapt(s, f);
  }
  eval->add_flag("--retrieval", f.retrieval, "also run the demonstration retrieval diagnostic");
  eval->add_flag("--fisher", f.fisher, "also estimate key/value Fisher terms");

  auto* bench = app.add_subcommand("bench", "attention cost counters and step-time scaling");
  add_common(bench, f);
  add_model(bench, f);
  bench->add_option("--k-grid", f.k_grid, "demonstration counts");
  bench->add_option("--ell", f.ell, "tokens per pair");
  bench->add_option("--repeats", f.repeats, "timed repeats per point");

  auto* insp = app.add_subcommand("inspect", "list the tensors of a checkpoint");
  insp->add_option("checkpoint", inspect_path, "checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (insp->parsed()) return inspect(inspect_path);
    std::string workflow;
    for (auto* s : {pretrain, adapt, eval, ablate, bench})
      if (s->parsed()) workflow = s->get_name();
    const json doc = merged(workflow, f);
    const auto cfg = icolab::parse_config(doc.dump(), "");
    if (f.print_config) {
      std::cout << cfg.canonical_json() << "\n";
      return 0;
    }
    return icolab::run_workflow(cfg, std::cerr);
  } catch (const icolab::ConfigError& e) {
    std::cerr << "error [config]: " << e.what() << "\n";
  } catch (const icolab::FormatError& e) {
    std::cerr << "error [io]: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return 1;
}
