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

#include "icolab/workflow.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "icolab/checkpoint.hpp"
#include "icolab/errors.hpp"

namespace icolab {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

const char* workflow_name(Workflow w) {
  switch (w) {
    case Workflow::kPretrain: return "pretrain";
    case Workflow::kAdapt: return "adapt";
    case Workflow::kEval: return "eval";
    case Workflow::kAblate: return "ablate";
    case Workflow::kBench: return "bench";
  }
  return "?";
}

Workflow workflow_from_name(const std::string& name) {
  for (auto w : {Workflow::kPretrain, Workflow::kAdapt, Workflow::kEval, Workflow::kAblate, Workflow::kBench})
    if (name == workflow_name(w)) return w;
  throw ConfigError("unknown workflow '" + name + "'");
}

namespace {

// ---- parsing helpers ----

void allow_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class T>
void maybe(const json& j, const char* key, const std::string& where, T& out) {
  if (j.contains(key)) out = field<T>(j, key, where);
}

std::string resolve_path(const std::string& p, const std::string& base) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).string();
}

json family_obj(const TaskFamilyConfig& c) {
  return {{"family", family_name(c.family)},       {"k", c.k},
          {"num_queries", c.num_queries},           {"multiple_choice", c.multiple_choice},
          {"num_options", c.num_options},           {"mapping_subset", c.mapping_subset},
          {"mapping_arity", c.mapping_arity},       {"image_distractors", c.image_distractors},
          {"modular_base", c.modular_base},
          {"modular_digits", c.modular_digits},     {"seq_alphabet", c.seq_alphabet},
          {"seq_min_len", c.seq_min_len},           {"seq_max_len", c.seq_max_len},
          {"grid_min", c.grid_min},                 {"grid_max", c.grid_max},
          {"grid_colors", c.grid_colors}};
}

TaskFamilyConfig family_from(const json& j, const std::string& where) {
  if (j.is_string()) return default_family_config(family_from_name(j.get<std::string>()));
  allow_keys(j, {"family", "k", "num_queries", "multiple_choice", "num_options", "mapping_subset", "mapping_arity",
                 "image_distractors",
                 "modular_base", "modular_digits", "seq_alphabet", "seq_min_len", "seq_max_len", "grid_min",
                 "grid_max", "grid_colors"},
             where);
  TaskFamilyConfig c = default_family_config(family_from_name(field<std::string>(j, "family", where)));
  maybe(j, "k", where, c.k);
  maybe(j, "num_queries", where, c.num_queries);
  maybe(j, "multiple_choice", where, c.multiple_choice);
  maybe(j, "num_options", where, c.num_options);
  maybe(j, "mapping_subset", where, c.mapping_subset);
  maybe(j, "mapping_arity", where, c.mapping_arity);
  maybe(j, "image_distractors", where, c.image_distractors);
  maybe(j, "modular_base", where, c.modular_base);
  maybe(j, "modular_digits", where, c.modular_digits);
  maybe(j, "seq_alphabet", where, c.seq_alphabet);
  maybe(j, "seq_min_len", where, c.seq_min_len);
  maybe(j, "seq_max_len", where, c.seq_max_len);
  maybe(j, "grid_min", where, c.grid_min);
  maybe(j, "grid_max", where, c.grid_max);
  maybe(j, "grid_colors", where, c.grid_colors);
  c.validate();
  return c;
}

json adapt_obj(const AdaptConfig& a) {
  return {{"lr", a.lr},
          {"iterations", a.iterations},
          {"p_drop", a.p_drop},
          {"leave_one_out", a.leave_one_out},
          {"init", init_scheme_name(a.init)},
          {"m", a.m},
          {"batch", a.batch},
          {"ttt_lr", a.ttt_lr},
          {"ttt_iterations", a.ttt_iterations},
          {"ttt_batch", a.ttt_batch},
          {"lora_rank", a.lora_rank},
          {"lora_scaling", a.lora_scaling},
          {"fisher_loo", a.fisher_loo}};
}

void apply_adapt(const json& j, const std::string& where, AdaptConfig& a) {
  allow_keys(j, {"lr", "iterations", "p_drop", "leave_one_out", "init", "m", "batch", "ttt_lr", "ttt_iterations",
                 "ttt_batch", "lora_rank", "lora_scaling", "fisher_loo"},
             where);
  maybe(j, "lr", where, a.lr);
  maybe(j, "iterations", where, a.iterations);
  maybe(j, "p_drop", where, a.p_drop);
  maybe(j, "leave_one_out", where, a.leave_one_out);
  if (j.contains("init")) a.init = init_scheme_from_name(field<std::string>(j, "init", where));
  maybe(j, "m", where, a.m);
  maybe(j, "batch", where, a.batch);
  maybe(j, "ttt_lr", where, a.ttt_lr);
  maybe(j, "ttt_iterations", where, a.ttt_iterations);
  maybe(j, "ttt_batch", where, a.ttt_batch);
  maybe(j, "lora_rank", where, a.lora_rank);
  maybe(j, "lora_scaling", where, a.lora_scaling);
  maybe(j, "fisher_loo", where, a.fisher_loo);
}

json model_json(const ModelConfig& c) { return json::parse(model_config_json(c)); }

ModelConfig model_json_parse(const json& j, const std::string& where) {
  try {
    return model_config_from_json(j.dump());
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::string read_text(const std::string& path, const char* what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError(std::string(what) + ": cannot read '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

std::string RunConfig::canonical_json() const {
  json methods = json::array();
  json per_method = json::object();
  for (const auto& a : adapt) {
    methods.push_back(method_name(a.method));
    per_method[method_name(a.method)] = adapt_obj(a);
  }
  json fams = json::array();
  for (const auto& f : suite.families) fams.push_back(family_obj(f));
  json mix = json::array();
  for (const auto& m : pretrain.mix) mix.push_back({{"family", family_obj(m.family)}, {"weight", m.weight}});
  json bench_methods = json::array();
  for (auto m : bench.methods) bench_methods.push_back(method_name(m));
  json j = {{"workflow", workflow_name(workflow)}, {"seed", seed}, {"output_dir", output_dir}};
  if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
  if (!model_config.empty()) j["model_config"] = model_config;
  if (checkpoint.empty() && model_config.empty()) j["model"] = model_json(model);
  j["suite"] = {{"families", fams}, {"tasks", suite.tasks}, {"seeds", suite.seeds}};
  j["methods"] = methods;
  j["adapt_per_method"] = per_method;
  j["pretrain"] = {{"steps", pretrain.steps},         {"batch", pretrain.batch},
                   {"lr", pretrain.lr},               {"clip_norm", pretrain.clip_norm},
                   {"eval_tasks", pretrain.eval_tasks}, {"mix", mix}};
  j["bench"] = {{"k_grid", bench.k_grid},
                {"ell", bench.ell},
                {"methods", bench_methods},
                {"leave_one_out", bench.leave_one_out},
                {"warmup", bench.warmup},
                {"repeats", bench.repeats},
                {"min_group_seconds", bench.min_group_seconds},
                {"model", model_json(bench_model)}};
  j["retrieval"] = retrieval;
  j["fisher"] = fisher;
  j["ablation_p_drop"] = ablation_p_drop;
  return j.dump(2);
}

uint64_t RunConfig::hash() const {
  // The output location is not part of the experiment's identity.
  json j = json::parse(canonical_json());
  j.erase("output_dir");
  return fnv1a64(j.dump());
}

RunConfig parse_config(const std::string& json_text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  const std::string w = "config";
  allow_keys(j,
             {"workflow", "seed", "output_dir", "checkpoint", "model_config", "model", "suite", "method", "methods",
              "adapt", "adapt_per_method", "pretrain", "bench", "retrieval", "fisher", "ablation_p_drop"},
             w);
  RunConfig c;
  if (!j.contains("workflow")) throw ConfigError("config: missing key 'workflow'");
  c.workflow = workflow_from_name(field<std::string>(j, "workflow", w));
  if (!j.contains("seed")) throw ConfigError("config: missing key 'seed' (the master seed is required)");
  c.seed = field<uint64_t>(j, "seed", w);
  maybe(j, "output_dir", w, c.output_dir);

  const int model_sources = j.contains("checkpoint") + j.contains("model_config") + j.contains("model");
  if (model_sources > 1)
    throw ConfigError("config: 'checkpoint', 'model_config' and 'model' are mutually exclusive; give one");
  if (j.contains("checkpoint")) {
    c.checkpoint = resolve_path(field<std::string>(j, "checkpoint", w), base_dir);
    if (!fs::exists(c.checkpoint)) throw ConfigError("config.checkpoint: file '" + c.checkpoint + "' does not exist");
    if (c.workflow == Workflow::kPretrain)
      throw ConfigError("config.checkpoint: pretrain starts from a model config, not a checkpoint");
  }
  if (j.contains("model_config")) {
    c.model_config = resolve_path(field<std::string>(j, "model_config", w), base_dir);
    if (!fs::exists(c.model_config))
      throw ConfigError("config.model_config: file '" + c.model_config + "' does not exist");
    c.model = model_json_parse(json::parse(read_text(c.model_config, "config.model_config")), "config.model_config");
  }
  if (j.contains("model")) c.model = model_json_parse(j.at("model"), "config.model");

  c.suite.families = {default_family_config(TaskFamily::kTokenMapping)};
  if (j.contains("suite")) {
    const auto& s = j.at("suite");
    allow_keys(s, {"families", "tasks", "seeds"}, "config.suite");
    if (s.contains("families")) {
      c.suite.families.clear();
      for (const auto& f : s.at("families")) c.suite.families.push_back(family_from(f, "config.suite.families"));
      if (c.suite.families.empty()) throw ConfigError("config.suite.families: empty");
    }
    maybe(s, "tasks", "config.suite", c.suite.tasks);
    maybe(s, "seeds", "config.suite", c.suite.seeds);
    if (c.suite.tasks < 1) throw ConfigError("config.suite.tasks: must be >= 1");
    if (c.suite.seeds.empty()) throw ConfigError("config.suite.seeds: empty");
  }

  if (j.contains("method") && j.contains("methods"))
    throw ConfigError("config: 'method' and 'methods' are mutually exclusive; give one");
  std::vector<Method> methods;
  if (j.contains("method")) methods.push_back(method_from_name(field<std::string>(j, "method", w)));
  if (j.contains("methods"))
    for (const auto& m : field<std::vector<std::string>>(j, "methods", w)) methods.push_back(method_from_name(m));
  if (methods.empty()) methods.push_back(Method::kCtKv);
  std::set<Method> seen;
  for (Method m : methods)
    if (!seen.insert(m).second) throw ConfigError(std::string("config.methods: '") + method_name(m) + "' listed twice");
  if (j.contains("adapt_per_method")) {
    for (const auto& [name, v] : j.at("adapt_per_method").items())
      if (!seen.count(method_from_name(name)))
        throw ConfigError("config.adapt_per_method: '" + name + "' is not among the requested methods");
  }
  for (Method m : methods) {
    AdaptConfig a = default_adapt_config(m);
    if (j.contains("adapt")) apply_adapt(j.at("adapt"), "config.adapt", a);
    if (j.contains("adapt_per_method") && j.at("adapt_per_method").contains(method_name(m)))
      apply_adapt(j.at("adapt_per_method").at(method_name(m)), std::string("config.adapt_per_method.") + method_name(m),
                  a);
    a.method = m;
    a.seed = c.seed;
    try {
      a.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.adapt (") + method_name(m) + "): " + e.what());
    }
    c.adapt.push_back(a);
  }

  c.pretrain.mix = default_pretrain_mix();
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    const std::string pw = "config.pretrain";
    allow_keys(p, {"steps", "batch", "lr", "clip_norm", "eval_tasks", "mix"}, pw);
    maybe(p, "steps", pw, c.pretrain.steps);
    maybe(p, "batch", pw, c.pretrain.batch);
    maybe(p, "lr", pw, c.pretrain.lr);
    maybe(p, "clip_norm", pw, c.pretrain.clip_norm);
    maybe(p, "eval_tasks", pw, c.pretrain.eval_tasks);
    if (p.contains("mix")) {
      c.pretrain.mix.clear();
      for (const auto& m : p.at("mix")) {
        allow_keys(m, {"family", "weight"}, pw + ".mix");
        FamilyWeight fw;
        fw.family = family_from(m.at("family"), pw + ".mix.family");
        maybe(m, "weight", pw + ".mix", fw.weight);
        if (!(fw.weight > 0)) throw ConfigError(pw + ".mix.weight: must be positive");
        c.pretrain.mix.push_back(fw);
      }
      if (c.pretrain.mix.empty()) throw ConfigError(pw + ".mix: empty");
    }
    if (c.pretrain.steps < 0 || c.pretrain.batch < 1 || !(c.pretrain.lr > 0))
      throw ConfigError(pw + ": steps >= 0, batch >= 1 and lr > 0 are required");
  }
  c.pretrain.model = c.model;
  c.pretrain.seed = c.seed;

  c.bench_model = bench_model_config();
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    const std::string bw = "config.bench";
    allow_keys(b, {"k_grid", "ell", "methods", "leave_one_out", "warmup", "repeats", "min_group_seconds", "model"}, bw);
    maybe(b, "k_grid", bw, c.bench.k_grid);
    maybe(b, "ell", bw, c.bench.ell);
    if (b.contains("methods")) {
      c.bench.methods.clear();
      for (const auto& m : field<std::vector<std::string>>(b, "methods", bw)) c.bench.methods.push_back(method_from_name(m));
    }
    maybe(b, "leave_one_out", bw, c.bench.leave_one_out);
    maybe(b, "warmup", bw, c.bench.warmup);
    maybe(b, "repeats", bw, c.bench.repeats);
    maybe(b, "min_group_seconds", bw, c.bench.min_group_seconds);
    if (b.contains("model")) c.bench_model = model_json_parse(b.at("model"), bw + ".model");
    if (c.bench.repeats < 5) throw ConfigError(bw + ".repeats: at least 5 repeats per point are required");
  }
  c.bench.seed = c.seed;

  maybe(j, "retrieval", w, c.retrieval);
  maybe(j, "fisher", w, c.fisher);
  maybe(j, "ablation_p_drop", w, c.ablation_p_drop);
  if (c.ablation_p_drop < 0 || c.ablation_p_drop >= 1) throw ConfigError("config.ablation_p_drop: must be in [0, 1)");
  return c;
}

RunConfig parse_config_file(const std::string& path) {
  const std::string text = read_text(path, "config");
  return parse_config(text, fs::path(path).parent_path().string());
}

// ---- workflows ----

namespace {

using Clock = std::chrono::steady_clock;

class ArtifactWriter {
 public:
  ArtifactWriter(const RunConfig& c) : dir_(c.output_dir) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(c.hash()));
    provenance_ = {{"config_hash", buf}, {"master_seed", c.seed}, {"workflow", workflow_name(c.workflow)}};
    fs::create_directories(dir_);
  }

  const json& provenance() const { return provenance_; }
  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }

  void text(const std::string& name, const std::string& content) const {
    const std::string p = path(name);
    fs::create_directories(fs::path(p).parent_path());
    const std::string tmp = p + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw FormatError("cannot write '" + tmp + "'");
      f << content;
    }
    fs::rename(tmp, p);
  }

  // Object with provenance first.
  void object(const std::string& name, json body) const {
    json j = {{"provenance", provenance_}};
    for (auto& [k, v] : body.items()) j[k] = v;
    text(name, j.dump(2) + "\n");
  }

  void lines(const std::string& name, const std::vector<std::string>& rows) const {
    std::string out = json{{"provenance", provenance_}}.dump() + "\n";
    for (const auto& r : rows) out += r + "\n";
    text(name, out);
  }

  void csv(const std::string& name, const std::string& body) const {
    text(name, "# config_hash=" + provenance_["config_hash"].get<std::string>() +
                   " master_seed=" + std::to_string(provenance_["master_seed"].get<uint64_t>()) + "\n" + body);
  }

 private:
  std::string dir_;
  json provenance_;
};

ModelWeights<float> load_model_for(const RunConfig& c, const char* workflow) {
  if (c.checkpoint.empty()) throw ConfigError(std::string(workflow) + ": a checkpoint is required");
  return model_from_checkpoint(load_checkpoint(c.checkpoint));
}

std::vector<TaskSpec> suite_tasks(const RunConfig& c) {
  std::vector<TaskSpec> out;
  for (const auto& f : c.suite.families) {
    auto s = make_task_suite(f, c.suite.tasks, c.seed);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

json summary_value(const AccuracySummary& s) { return json::parse(summary_json(s)); }

void run_pretrain(const RunConfig& c, const ArtifactWriter& out, std::ostream& log, json& timing) {
  PretrainReport rep;
  const auto t0 = Clock::now();
  const auto weights = meta_pretrain(c.pretrain, &rep, [&](int step, double loss, double lr) {
    if (step % 100 == 0 || step + 1 == c.pretrain.steps)
      log << "pretrain step " << step << " loss " << loss << " lr " << lr << "\n";
  });
  timing["pretrain_seconds"] = std::chrono::duration<double>(Clock::now() - t0).count();

  json accs = json::array();
  json gate = nullptr;
  for (size_t i = 0; i < c.pretrain.mix.size(); ++i) {
    const auto& f = c.pretrain.mix[i].family;
    accs.push_back({{"family", family_name(f.family)}, {"icl_accuracy", rep.heldout_icl_accuracy[i]}});
    if (f.family == TaskFamily::kTokenMapping && gate.is_null()) {
      const double chance = 1.0 / f.num_options;
      gate = {{"family", family_name(f.family)},
              {"accuracy", rep.heldout_icl_accuracy[i]},
              {"chance", chance},
              {"threshold", chance + 0.30},
              {"pass", rep.heldout_icl_accuracy[i] >= chance + 0.30}};
    }
  }
  json meta = {{"provenance", out.provenance()}, {"final_loss", rep.final_loss}, {"heldout", accs}};
  save_checkpoint(checkpoint_from_model(weights, meta.dump()), out.path("model.ckpt"));
  out.object("pretrain.json", {{"final_loss", rep.final_loss}, {"heldout", accs}, {"gate", gate}, {"losses", rep.losses}});
  if (!gate.is_null()) log << "icl gate: accuracy " << gate["accuracy"] << " threshold " << gate["threshold"]
                           << (gate["pass"].get<bool>() ? " (pass)\n" : " (below gate)\n");
}

void run_adapt(const RunConfig& c, const ArtifactWriter& out, std::ostream& log, json& timing) {
  const auto model = load_model_for(c, "adapt");
  const auto tasks = suite_tasks(c);
  fs::create_directories(out.path("contexts"));
  std::vector<std::string> rows;
  json times = json::array();
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    for (uint64_t seed : c.suite.seeds) {
      const TaskInstance task = tasks[ti].instantiate(seed);
      for (const auto& base : c.adapt) {
        AdaptConfig a = base;
        a.seed = RngStream(base.seed).split(task.id).split(seed).key();
        const AdaptResult res = adapt(model, task.demos, a);
        const std::string file = std::string("contexts/") + method_name(a.method) + "-" +
                                 family_name(task.config.family) + "-" + std::to_string(ti) + "-s" +
                                 std::to_string(seed) + ".ckpt";
        Checkpoint ck;
        ck.model = model.config;
        ck.metadata = json{{"provenance", out.provenance()}, {"method", method_name(a.method)}, {"task_id", task.id},
                           {"seed", seed}}
                          .dump();
        append_adapt_result(ck, res);
        save_checkpoint(ck, out.path(file));
        rows.push_back(json{{"task_id", task.id},
                            {"family", family_name(task.config.family)},
                            {"task_index", ti},
                            {"seed", seed},
                            {"method", method_name(a.method)},
                            {"trainable_params", res.trainable_params},
                            {"census_params", res.census_params},
                            {"losses", res.losses},
                            {"context_file", file}}
                           .dump());
        times.push_back({{"task_id", task.id}, {"seed", seed}, {"method", method_name(a.method)},
                         {"train_seconds", res.train_seconds}});
      }
    }
    log << "adapt: task " << ti + 1 << "/" << tasks.size() << " done\n";
  }
  out.lines("adapt.jsonl", rows);
  timing["runs"] = times;
}

void run_eval(const RunConfig& c, const ArtifactWriter& out, std::ostream& log, json& timing) {
  const auto model = load_model_for(c, "eval");
  const auto tasks = suite_tasks(c);
  std::vector<std::string> rows;
  std::vector<std::string> timing_rows;
  std::vector<AccuracySummary> summaries;
  std::map<Method, std::vector<EvalRecord>> by_method;
  json failures = json::array();
  for (const auto& a : c.adapt) {
    auto recs = evaluate_method(model, tasks, a, c.suite.seeds);
    for (const auto& r : recs) {
      rows.push_back(eval_record_json(r));
      timing_rows.push_back(json{{"task_id", r.task_id}, {"seed", r.seed}, {"method", method_name(r.method)},
                                 {"train_seconds", r.train_seconds}}
                                .dump());
      if (!r.ok()) failures.push_back({{"task_id", r.task_id}, {"seed", r.seed}, {"error", *r.error}});
    }
    for (const auto& f : c.suite.families) {
      std::vector<EvalRecord> fam;
      for (const auto& r : recs)
        if (r.family == f.family) fam.push_back(r);
      summaries.push_back(summarize(fam, method_name(a.method)));
      log << "eval " << method_name(a.method) << " " << family_name(f.family) << ": mean " << summaries.back().mean
          << " sd " << summaries.back().sd << "\n";
    }
    by_method[a.method] = std::move(recs);
  }
  json sums = json::array();
  for (const auto& s : summaries) sums.push_back(summary_value(s));
  json confusions = json::array();
  if (by_method.count(Method::kIcl)) {
    for (const auto& [m, recs] : by_method) {
      if (m == Method::kIcl) continue;
      confusions.push_back(json::parse(confusion_json(confusion_matrix(by_method[Method::kIcl], recs), "icl", method_name(m))));
    }
  }
  out.lines("records.jsonl", rows);
  out.object("summary.json", {{"summaries", sums}, {"confusion", confusions}, {"failures", failures}});
  out.csv("summary.csv", summaries_csv(summaries));

  if (c.retrieval) {
    const auto rep = retrieval_diagnostic(model, tasks, c.suite.seeds);
    out.object("retrieval.json", json::parse(retrieval_json(rep)));
    out.csv("retrieval.csv", summaries_csv(rep.families));
  }
  if (c.fisher) {
    std::vector<std::string> frows;
    int v_wins = 0, total = 0;
    for (const auto& spec : tasks) {
      const TaskInstance task = spec.instantiate(c.suite.seeds.front());
      const auto prefix = init_ct_kv(model, task.demos).prefix();
      const auto f = fisher_estimate(model, prefix, task.demos, c.adapt.front().fisher_loo);
      v_wins += f.f_v > f.f_k;
      ++total;
      frows.push_back(json{{"task_id", task.id}, {"family", family_name(task.config.family)}, {"f_k", f.f_k},
                           {"f_v", f.f_v}, {"layer_k", f.layer_k}, {"layer_v", f.layer_v}}
                          .dump());
    }
    frows.push_back(json{{"fraction_v_greater", total ? static_cast<double>(v_wins) / total : 0.0}, {"tasks", total}}.dump());
    out.lines("fisher.jsonl", frows);
  }
  out.lines("timing.jsonl", timing_rows);
  timing["records"] = static_cast<int64_t>(timing_rows.size());
}

void run_ablate(const RunConfig& c, const ArtifactWriter& out, std::ostream& log, json&) {
  const auto model = load_model_for(c, "ablate");
  const auto tasks = suite_tasks(c);
  AdaptConfig base = c.adapt.front();
  for (const auto& a : c.adapt)
    if (a.method == Method::kCtKv) base = a;
  const auto rep = ablation_suite(model, tasks, c.suite.seeds, base, c.ablation_p_drop);
  std::vector<AccuracySummary> flat;
  for (const auto& row : rep.rows) {
    for (const auto& s : row.families) {
      flat.push_back(s);
      log << "ablate " << row.name << " " << family_name(s.family) << ": mean " << s.mean << " sd " << s.sd << "\n";
    }
  }
  for (auto f : rep.loo_reversal) log << "note: " << family_name(f) << " scores higher without leave-one-out masking\n";
  out.object("ablation.json", json::parse(ablation_json(rep)));
  out.csv("ablation.csv", summaries_csv(flat));
}

void run_bench(const RunConfig& c, const ArtifactWriter& out, std::ostream& log, json& timing) {
  const auto model = c.checkpoint.empty() ? init_weights(c.bench_model, RngStream(c.seed).split("bench-model"))
                                          : load_model_for(c, "bench");
  const auto rep = complexity_bench(model, c.bench);
  bool all_match = true;
  for (const auto& r : rep.records) all_match = all_match && r.counters_match;
  for (const auto& f : rep.fits) log << "bench " << method_name(f.method) << ": log-log slope " << f.slope << "\n";
  json body = json::parse(bench_json(rep));
  body["counters_match"] = all_match;
  out.object("bench.json", body);
  out.object("bench_timing.json", json::parse(bench_json(rep, true)));
  out.csv("bench_timing.csv", bench_csv(rep));
  timing["fits"] = json::parse(bench_json(rep, true))["timing"]["fits"];
  if (!all_match) throw NumericError("bench: attention counters differ from the closed-form counts");
}

}  // namespace

int run_workflow(const RunConfig& config, std::ostream& log) {
  std::string stage = "setup";
  try {
    ArtifactWriter out(config);
    out.text("config.json", config.canonical_json() + "\n");
    json timing;
    const auto t0 = Clock::now();
    stage = workflow_name(config.workflow);
    switch (config.workflow) {
      case Workflow::kPretrain: run_pretrain(config, out, log, timing); break;
      case Workflow::kAdapt: run_adapt(config, out, log, timing); break;
      case Workflow::kEval: run_eval(config, out, log, timing); break;
      case Workflow::kAblate: run_ablate(config, out, log, timing); break;
      case Workflow::kBench: run_bench(config, out, log, timing); break;
    }
    timing["wall_seconds"] = std::chrono::duration<double>(Clock::now() - t0).count();
    out.object("timing.json", {{"timing", timing}});
    return 0;
  } catch (const ConfigError& e) {
    log << "error [" << stage << "/config]: " << e.what() << "\n";
  } catch (const FormatError& e) {
    log << "error [" << stage << "/io]: " << e.what() << "\n";
  } catch (const NumericError& e) {
    log << "error [" << stage << "/numeric]: " << e.what() << "\n";
  } catch (const std::exception& e) {
    log << "error [" << stage << "]: " << e.what() << "\n";
  }
  return 1;
}

}  // namespace icolab
