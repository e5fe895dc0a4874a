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

#include "icolab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "icolab/errors.hpp"
#include "icolab/pretrain.hpp"

namespace icolab {

using json = nlohmann::ordered_json;

TaskInstance TaskSpec::instantiate(uint64_t demo_seed) const {
  return gen_task_seeded(config, rng, demo_seed, pool);
}

std::vector<TaskSpec> make_task_suite(const TaskFamilyConfig& config, int count, uint64_t seed, RulePool pool) {
  config.validate();
  ICOLAB_REQUIRE(count >= 0, "make_task_suite: negative count");
  const RngStream root = RngStream(seed).split("suite").split(family_name(config.family));
  std::vector<TaskSpec> out;
  for (int i = 0; i < count; ++i) out.push_back({config, root.split(static_cast<uint64_t>(i)), pool});
  return out;
}

bool EvalRecord::solved() const {
  return ok() && !correct.empty() && std::all_of(correct.begin(), correct.end(), [](uint8_t c) { return c != 0; });
}

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double median_of(std::vector<double> v) {
  ICOLAB_REQUIRE(!v.empty(), "median of empty sample");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

uint64_t adapt_seed(uint64_t base, uint64_t task_id, uint64_t seed) {
  return RngStream(base).split(task_id).split(seed).key();
}

bool item_correct(const ModelWeights<float>& model, const Conditioning<float>& cond, const TaskInstance& task,
                  const QueryItem& q) {
  TaskInstance probe;
  probe.config = task.config;
  probe.queries.push_back(q);
  return answer_correct(model, cond, probe, 0);
}

}  // namespace

std::vector<EvalRecord> evaluate_method(const ModelWeights<float>& model, const std::vector<TaskSpec>& tasks,
                                        const AdaptConfig& config, const std::vector<uint64_t>& seeds) {
  config.validate();
  std::vector<EvalRecord> out;
  for (const auto& spec : tasks) {
    for (uint64_t seed : seeds) {
      EvalRecord r;
      r.family = spec.config.family;
      r.method = config.method;
      r.seed = seed;
      r.lr = config.method == Method::kTtt ? config.ttt_lr : config.lr;
      r.iterations = config.method == Method::kIcl  ? 0
                     : config.method == Method::kTtt ? config.ttt_iterations
                     : config.method == Method::kTttCtKv ? config.ttt_iterations + config.iterations
                                                          : config.iterations;
      try {
        const TaskInstance task = spec.instantiate(seed);
        r.task_id = task.id;
        AdaptConfig ac = config;
        ac.seed = adapt_seed(config.seed, task.id, seed);
        const AdaptResult res = adapt(model, task.demos, ac);
        r.train_seconds = res.train_seconds;
        r.trainable_params = res.trainable_params;
        const auto cond = res.inference.conditioning();
        int hits = 0;
        for (size_t q = 0; q < task.queries.size(); ++q) {
          const bool ok = answer_correct(model, cond, task, static_cast<int>(q));
          r.correct.push_back(ok ? 1 : 0);
          hits += ok;
        }
        r.accuracy = task.queries.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(task.queries.size());
      } catch (const std::exception& e) {
        r.error = std::string(method_name(config.method)) + ": " + e.what();
        r.correct.clear();
        r.accuracy = 0.0;
        if (r.task_id == 0) r.task_id = spec.rng.key();
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

AccuracySummary summarize(const std::vector<EvalRecord>& records, const std::string& label) {
  AccuracySummary s;
  if (!records.empty()) {
    s.family = records.front().family;
    s.label = label.empty() ? method_name(records.front().method) : label;
  } else {
    s.label = label;
  }
  std::map<uint64_t, std::vector<double>> by_seed;
  std::set<uint64_t> task_ids;
  std::vector<double> times;
  for (const auto& r : records) {
    task_ids.insert(r.task_id);
    if (!r.ok()) {
      ++s.failures;
      continue;
    }
    by_seed[r.seed].push_back(r.accuracy);
    times.push_back(r.train_seconds);
  }
  s.tasks = static_cast<int>(task_ids.size());
  s.seeds = static_cast<int>(by_seed.size());
  for (const auto& [seed, acc] : by_seed) s.per_seed.push_back(mean_of(acc));
  s.mean = mean_of(s.per_seed);
  s.sd = sd_of(s.per_seed);
  s.mean_train_seconds = mean_of(times);
  return s;
}

ConfusionMatrix confusion_matrix(const std::vector<EvalRecord>& a, const std::vector<EvalRecord>& b) {
  auto index = [](const std::vector<EvalRecord>& rs, const char* side) {
    std::map<std::pair<uint64_t, uint64_t>, bool> m;
    for (const auto& r : rs)
      if (!m.emplace(std::make_pair(r.task_id, r.seed), r.solved()).second)
        throw ContractViolation(std::string("confusion_matrix: duplicate (task, seed) in ") + side);
    return m;
  };
  const auto ma = index(a, "A");
  const auto mb = index(b, "B");
  if (ma.size() != mb.size()) throw ContractViolation("confusion_matrix: record sets cover different (task, seed) universes");
  ConfusionMatrix c;
  for (const auto& [key, sa] : ma) {
    auto it = mb.find(key);
    if (it == mb.end())
      throw ContractViolation("confusion_matrix: task " + std::to_string(key.first) + " seed " +
                              std::to_string(key.second) + " missing from B");
    const bool sb = it->second;
    if (sa && sb) ++c.both;
    else if (sa) ++c.a_only;
    else if (sb) ++c.b_only;
    else ++c.neither;
  }
  return c;
}

RetrievalReport retrieval_diagnostic(const ModelWeights<float>& model, const std::vector<TaskSpec>& tasks,
                                     const std::vector<uint64_t>& seeds) {
  std::map<TaskFamily, std::vector<EvalRecord>> by_family;
  for (const auto& spec : tasks) {
    for (uint64_t seed : seeds) {
      const TaskInstance task = spec.instantiate(seed);
      Conditioning<float> cond;
      cond.literal = task.demos.context_tokens();
      RngStream rng = RngStream(seed).split("retrieval").split(task.id);
      EvalRecord r;
      r.task_id = task.id;
      r.family = task.config.family;
      r.seed = seed;
      int hits = 0;
      for (const auto& p : task.demos.pairs) {
        const QueryItem q = make_query(task.config, task.rule, p.x, rng);
        const bool ok = item_correct(model, cond, task, q);
        r.correct.push_back(ok ? 1 : 0);
        hits += ok;
      }
      r.accuracy = static_cast<double>(hits) / static_cast<double>(task.demos.pairs.size());
      by_family[r.family].push_back(std::move(r));
    }
  }
  RetrievalReport rep;
  for (const auto& [fam, recs] : by_family) rep.families.push_back(summarize(recs, family_name(fam)));
  return rep;
}

AblationReport ablation_suite(const ModelWeights<float>& model, const std::vector<TaskSpec>& tasks,
                              const std::vector<uint64_t>& seeds, const AdaptConfig& base, double p_drop) {
  struct Variant {
    const char* name;
    bool loo;
    bool drop;
  };
  const Variant variants[] = {{"neither", false, false}, {"no-loo", false, true}, {"no-dropout", true, false},
                              {"both", true, true}};
  AblationReport rep;
  for (const auto& v : variants) {
    AdaptConfig c = base;
    c.method = Method::kCtKv;
    c.leave_one_out = v.loo;
    c.p_drop = v.drop ? p_drop : 0.0;
    AblationRow row;
    row.name = v.name;
    row.leave_one_out = v.loo;
    row.p_drop = c.p_drop;
    std::map<TaskFamily, std::vector<EvalRecord>> by_family;
    for (auto& r : evaluate_method(model, tasks, c, seeds)) by_family[r.family].push_back(std::move(r));
    for (const auto& [fam, recs] : by_family) row.families.push_back(summarize(recs, v.name));
    rep.rows.push_back(std::move(row));
  }
  const auto& no_loo = rep.rows[1].families;
  const auto& both = rep.rows[3].families;
  for (size_t i = 0; i < both.size(); ++i) {
    const TaskFamily fam = both[i].family;
    int k = 0;
    for (const auto& t : tasks)
      if (t.config.family == fam) k = std::max(k, t.config.k);
    if (k <= 4 && no_loo[i].mean > both[i].mean) rep.loo_reversal.push_back(fam);
  }
  return rep;
}

ModelConfig bench_model_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 8;
  c.max_seq_len = 1024;
  c.ffn_mult = 1;
  return c;
}

int64_t expected_attention_per_head(Method method, int k, int ell) {
  const int64_t n = ell;
  const int64_t ctx = static_cast<int64_t>(k - 1) * n;
  switch (method) {
    case Method::kCtKv:
    case Method::kCtV:
      return n * (ctx + n);
    case Method::kCtPrompt:
    case Method::kTtt:
      return (ctx + n) * (ctx + n);
    default:
      throw ContractViolation(std::string("expected_attention_per_head: no formula for ") + method_name(method));
  }
}

DemonstrationSet bench_demonstrations(int k, int ell, RngStream rng) {
  ICOLAB_REQUIRE(k >= 2 && ell >= 5, "bench_demonstrations: need k >= 2 and ell >= 5");
  DemonstrationSet d;
  for (int i = 0; i < k; ++i) {
    DemoPair p;
    for (int j = 0; j < ell - 4; ++j) p.x.push_back(Vocabulary::input(static_cast<int>(rng.below(Vocabulary::kSymbols))));
    p.x.push_back(Vocabulary::kArrow);
    for (int j = 0; j < 2; ++j) p.y.push_back(Vocabulary::output(static_cast<int>(rng.below(Vocabulary::kSymbols))));
    p.y.push_back(Vocabulary::kStop);
    d.pairs.push_back(std::move(p));
  }
  return d;
}

ExponentFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  ICOLAB_REQUIRE(x.size() == y.size() && x.size() >= 2, "fit_loglog: need at least two paired points");
  std::vector<double> lx, ly;
  for (size_t i = 0; i < x.size(); ++i) {
    ICOLAB_REQUIRE(x[i] > 0 && y[i] > 0, "fit_loglog: values must be positive");
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  const double mx = mean_of(lx), my = mean_of(ly);
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  ICOLAB_REQUIRE(sxx > 0, "fit_loglog: x values are all equal");
  ExponentFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

namespace {

std::atomic<bool> g_bench_active{false};

struct BenchLane {
  BenchLane() {
    if (g_bench_active.exchange(true)) throw ContractViolation("complexity_bench: another benchmark is running");
  }
  ~BenchLane() { g_bench_active = false; }
};

}  // namespace

BenchReport complexity_bench(const ModelWeights<float>& model, const BenchConfig& config) {
  ICOLAB_REQUIRE(config.k_grid.size() >= 2, "complexity_bench: k grid needs two points");
  ICOLAB_REQUIRE(config.repeats >= 1 && config.warmup >= 0, "complexity_bench: bad repeat counts");
  BenchLane lane;
  const RngStream root = RngStream(config.seed).split("bench");
  BenchReport rep;
  for (Method m : config.methods) {
    std::vector<double> ks, times;
    for (int k : config.k_grid) {
      const DemonstrationSet demos = bench_demonstrations(k, config.ell, root.split(static_cast<uint64_t>(k)));
      AdaptConfig ac = default_adapt_config(m);
      ac.batch = 1;
      ac.ttt_batch = 1;
      ac.p_drop = 0.0;
      ac.leave_one_out = config.leave_one_out;
      ac.seed = root.split(method_name(m)).split(static_cast<uint64_t>(k)).key();
      BenchRecord rec;
      rec.method = m;
      rec.k = k;
      rec.ell = config.ell;
      for (int group = 1;; group *= 2) {
        const int steps = config.warmup + config.repeats * group;
        if (m == Method::kTtt) ac.ttt_iterations = steps;
        else ac.iterations = steps;
        const AdaptResult res = adapt(model, demos, ac);
        rec.repeats.clear();
        for (int r = 0; r < config.repeats; ++r) {
          const auto first = res.step_seconds.begin() + config.warmup + r * group;
          rec.repeats.push_back(std::accumulate(first, first + group, 0.0) / group);
        }
        rec.step_seconds = median_of(rec.repeats);
        rec.steps_per_group = group;
        rec.per_head = res.attention_per_head;
        rec.per_step = res.attention_products / steps;
        if (rec.step_seconds * group >= config.min_group_seconds || group >= 1024) break;
      }
      rec.expected_per_head = config.leave_one_out || m == Method::kTtt
                                  ? expected_attention_per_head(m, k, config.ell)
                                  : expected_attention_per_head(m, k + 1, config.ell);
      const int64_t heads = static_cast<int64_t>(model.config.n_layers) * model.config.n_heads;
      rec.counters_match = rec.per_head == rec.expected_per_head && rec.per_step == heads * rec.expected_per_head;
      ks.push_back(k);
      times.push_back(rec.step_seconds);
      rep.records.push_back(std::move(rec));
    }
    ExponentFit f = fit_loglog(ks, times);
    f.method = m;
    rep.fits.push_back(f);
  }
  return rep;
}

// ---- serialization ----

namespace {

json summary_obj(const AccuracySummary& s) {
  return {{"label", s.label}, {"family", family_name(s.family)}, {"tasks", s.tasks}, {"seeds", s.seeds},
          {"failures", s.failures}, {"mean", s.mean}, {"sd", s.sd}, {"per_seed", s.per_seed}};
}

}  // namespace

std::string eval_record_json(const EvalRecord& r, bool with_timing) {
  json j = {{"task_id", r.task_id}, {"family", family_name(r.family)}, {"method", method_name(r.method)},
            {"seed", r.seed}};
  if (r.ok()) {
    j["accuracy"] = r.accuracy;
    j["correct"] = r.correct;
  } else {
    j["error"] = *r.error;
  }
  j["iterations"] = r.iterations;
  j["lr"] = r.lr;
  j["trainable_params"] = r.trainable_params;
  if (with_timing) j["timing"] = {{"train_seconds", r.train_seconds}};
  return j.dump();
}

std::string summary_json(const AccuracySummary& s, bool with_timing) {
  json j = summary_obj(s);
  if (with_timing) j["timing"] = {{"mean_train_seconds", s.mean_train_seconds}};
  return j.dump();
}

std::string confusion_json(const ConfusionMatrix& c, const std::string& a, const std::string& b) {
  json j = {{"a", a}, {"b", b}, {"both_solved", c.both}, {"a_only", c.a_only}, {"b_only", c.b_only},
            {"neither", c.neither}, {"total", c.total()}};
  return j.dump();
}

std::string retrieval_json(const RetrievalReport& r) {
  json fams = json::array();
  for (const auto& s : r.families) fams.push_back(summary_obj(s));
  return json{{"retrieval", fams}}.dump();
}

std::string ablation_json(const AblationReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json fams = json::array();
    for (const auto& s : row.families) fams.push_back(summary_obj(s));
    rows.push_back({{"name", row.name}, {"leave_one_out", row.leave_one_out}, {"p_drop", row.p_drop},
                    {"families", fams}});
  }
  json rev = json::array();
  for (auto f : r.loo_reversal) rev.push_back(family_name(f));
  return json{{"rows", rows}, {"loo_reversal", rev}}.dump();
}

std::string bench_json(const BenchReport& r, bool with_timing) {
  json recs = json::array();
  for (const auto& b : r.records) {
    json j = {{"method", method_name(b.method)}, {"k", b.k}, {"ell", b.ell}, {"per_head", b.per_head},
              {"expected_per_head", b.expected_per_head}, {"per_step", b.per_step},
              {"counters_match", b.counters_match}};
    if (with_timing)
      j["timing"] = {{"step_seconds", b.step_seconds}, {"repeats", b.repeats}, {"steps_per_group", b.steps_per_group}};
    recs.push_back(j);
  }
  json out = {{"records", recs}};
  if (with_timing) {
    json fits = json::array();
    for (const auto& f : r.fits)
      fits.push_back({{"method", method_name(f.method)}, {"slope", f.slope}, {"intercept", f.intercept}});
    out["timing"] = {{"fits", fits}};
  }
  return out.dump();
}

std::string summaries_csv(const std::vector<AccuracySummary>& rows) {
  std::ostringstream os;
  os.precision(6);
  os << "label,family,tasks,seeds,failures,mean,sd\n";
  for (const auto& s : rows)
    os << s.label << ',' << family_name(s.family) << ',' << s.tasks << ',' << s.seeds << ',' << s.failures << ','
       << s.mean << ',' << s.sd << '\n';
  return os.str();
}

std::string bench_csv(const BenchReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << "method,k,ell,per_head,expected_per_head,per_step,step_seconds\n";
  for (const auto& b : r.records)
    os << method_name(b.method) << ',' << b.k << ',' << b.ell << ',' << b.per_head << ',' << b.expected_per_head
       << ',' << b.per_step << ',' << b.step_seconds << '\n';
  return os.str();
}

}  // namespace icolab
