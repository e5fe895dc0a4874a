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

#include "icolab/tasks.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "icolab/errors.hpp"

namespace icolab {

using json = nlohmann::json;

const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::kTokenMapping: return "token-mapping";
    case TaskFamily::kModularAffine: return "modular-affine";
    case TaskFamily::kSequenceTransform: return "sequence-transform";
    case TaskFamily::kMiniGrid: return "mini-grid";
  }
  return "?";
}

TaskFamily family_from_name(const std::string& name) {
  for (auto f : {TaskFamily::kTokenMapping, TaskFamily::kModularAffine,
                 TaskFamily::kSequenceTransform, TaskFamily::kMiniGrid}) {
    if (name == family_name(f)) return f;
  }
  throw ConfigError("unknown task family '" + name + "'");
}

int TaskFamilyConfig::modulus() const {
  int m = 1;
  for (int i = 0; i < modular_digits; ++i) m *= modular_base;
  return m;
}

namespace {

int64_t count_mapping_inputs(int n, int arity) {
  int64_t c = 1;
  for (int i = 0; i < arity; ++i) c *= (n - i);
  return c;
}

}  // namespace

void TaskFamilyConfig::validate() const {
  auto fail = [this](const std::string& m) {
    throw ConfigError(std::string(family_name(family)) + ": " + m);
  };
  if (k < 1) fail("k must be at least 1");
  if (num_queries < 1) fail("num_queries must be at least 1");
  if (multiple_choice && num_options < 2) fail("num_options must be at least 2");
  switch (family) {
    case TaskFamily::kTokenMapping:
      if (mapping_subset < 2 || mapping_subset > Vocabulary::kSymbols) fail("mapping_subset out of range");
      if (mapping_arity < 1 || mapping_arity > mapping_subset) fail("mapping_arity out of range");
      if (k + num_queries > count_mapping_inputs(mapping_subset, mapping_arity))
        fail("not enough distinct inputs for k + num_queries");
      break;
    case TaskFamily::kModularAffine:
      if (modular_base < 2 || modular_base > Vocabulary::kSymbols) fail("modular_base out of range");
      if (modular_digits < 1) fail("modular_digits must be positive");
      if (k + num_queries > modulus()) fail("not enough distinct inputs for k + num_queries");
      break;
    case TaskFamily::kSequenceTransform:
      if (seq_alphabet < 2 || seq_alphabet > Vocabulary::kSymbols) fail("seq_alphabet out of range");
      if (seq_min_len < 2 || seq_max_len < seq_min_len) fail("sequence lengths out of range");
      break;
    case TaskFamily::kMiniGrid:
      if (grid_min < 1 || grid_max < grid_min) fail("grid sizes out of range");
      if (grid_colors < 3 || grid_colors > Vocabulary::kSymbols) fail("grid_colors out of range");
      break;
  }
}

TaskFamilyConfig default_family_config(TaskFamily family) {
  TaskFamilyConfig c;
  c.family = family;
  switch (family) {
    case TaskFamily::kTokenMapping:
    case TaskFamily::kModularAffine:
      c.k = 16;
      c.multiple_choice = true;
      break;
    case TaskFamily::kSequenceTransform:
      c.k = 10;
      c.multiple_choice = false;
      break;
    case TaskFamily::kMiniGrid:
      c.k = 3;
      c.multiple_choice = false;
      break;
  }
  return c;
}

std::string RuleDescriptor::canonical() const {
  std::ostringstream os;
  os << family_name(family) << '|';
  auto list = [&os](const std::vector<int>& v) {
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << '|';
  };
  switch (family) {
    case TaskFamily::kTokenMapping:
      list(subset);
      list(image);
      break;
    case TaskFamily::kModularAffine:
      os << a << '|' << b;
      break;
    case TaskFamily::kSequenceTransform:
      list(subset);
      os << static_cast<int>(seq_op) << '|' << (seq_op == SequenceOp::kRotate ? rotate_by : 0);
      break;
    case TaskFamily::kMiniGrid:
      list(subset);
      os << static_cast<int>(grid_op) << '|';
      if (grid_op == GridOp::kRecolor) list(image);
      break;
  }
  return os.str();
}

RulePool rule_pool(const RuleDescriptor& rule) {
  return RngStream::mix(fnv1a64(rule.canonical())) % 5 == 0 ? RulePool::kEval : RulePool::kTrain;
}

std::vector<int> DemonstrationSet::context_tokens() const {
  std::vector<int> out;
  for (const auto& p : pairs) {
    out.insert(out.end(), p.x.begin(), p.x.end());
    out.insert(out.end(), p.y.begin(), p.y.end());
  }
  return out;
}

std::vector<int> DemonstrationSet::segment_map() const {
  std::vector<int> out;
  for (size_t i = 0; i < pairs.size(); ++i) {
    out.insert(out.end(), pairs[i].x.size() + pairs[i].y.size(), static_cast<int>(i + 1));
  }
  return out;
}

void DemonstrationSet::validate() const {
  ICOLAB_REQUIRE(!pairs.empty(), "DemonstrationSet: no pairs");
  for (size_t i = 0; i < pairs.size(); ++i) {
    ICOLAB_REQUIRE(!pairs[i].x.empty() && !pairs[i].y.empty(),
                   "DemonstrationSet: pair " + std::to_string(i + 1) + " is empty");
    ICOLAB_REQUIRE(pairs[i].y.back() == Vocabulary::kStop,
                   "DemonstrationSet: pair " + std::to_string(i + 1) + " does not end with STOP");
  }
}

// ---- grids ----

std::vector<int> encode_grid(const Grid& g, bool as_output) {
  std::vector<int> out;
  for (const auto& row : g) {
    for (int c : row) out.push_back(as_output ? Vocabulary::output(c) : Vocabulary::input(c));
    out.push_back(Vocabulary::kRowSep);
  }
  return out;
}

Grid decode_grid(const std::vector<int>& tokens, bool as_output) {
  Grid g;
  std::vector<int> row;
  for (int t : tokens) {
    if (t == Vocabulary::kRowSep) {
      if (row.empty()) throw FormatError("grid: empty row");
      if (!g.empty() && row.size() != g.front().size()) throw FormatError("grid: ragged rows");
      g.push_back(std::move(row));
      row.clear();
      continue;
    }
    const bool ok = as_output ? Vocabulary::is_output(t) : Vocabulary::is_input(t);
    if (!ok) throw FormatError("grid: unexpected token " + std::to_string(t));
    row.push_back(t - (as_output ? Vocabulary::kOutputBase : Vocabulary::kInputBase));
  }
  if (!row.empty()) throw FormatError("grid: last row is not terminated");
  return g;
}

namespace {

int input_index(int t) {
  if (!Vocabulary::is_input(t)) throw FormatError("expected an input symbol, got token " + std::to_string(t));
  return t - Vocabulary::kInputBase;
}

std::vector<int> strip_arrow(const std::vector<int>& x) {
  if (x.empty() || x.back() != Vocabulary::kArrow) throw FormatError("input does not end with ARROW");
  return {x.begin(), x.end() - 1};
}

Grid apply_grid(const RuleDescriptor& r, const Grid& g) {
  const int bg = r.subset.at(0);
  switch (r.grid_op) {
    case GridOp::kRecolor: {
      Grid out = g;
      for (auto& row : out)
        for (auto& c : row) {
          auto it = std::find(r.subset.begin(), r.subset.end(), c);
          if (it == r.subset.end()) throw FormatError("grid: color outside the palette");
          c = r.subset[static_cast<size_t>(r.image[static_cast<size_t>(it - r.subset.begin())])];
        }
      return out;
    }
    case GridOp::kReflect: {
      Grid out = g;
      for (auto& row : out) std::reverse(row.begin(), row.end());
      return out;
    }
    case GridOp::kCrop: {
      size_t r0 = g.size(), r1 = 0, c0 = g.empty() ? 0 : g[0].size(), c1 = 0;
      bool any = false;
      for (size_t i = 0; i < g.size(); ++i)
        for (size_t j = 0; j < g[i].size(); ++j)
          if (g[i][j] != bg) {
            any = true;
            r0 = std::min(r0, i), r1 = std::max(r1, i);
            c0 = std::min(c0, j), c1 = std::max(c1, j);
          }
      if (!any) return {};
      Grid out;
      for (size_t i = r0; i <= r1; ++i) out.emplace_back(g[i].begin() + c0, g[i].begin() + c1 + 1);
      return out;
    }
  }
  return g;
}

}  // namespace

std::vector<int> rule_oracle(const RuleDescriptor& rule, const TaskFamilyConfig& config,
                             const std::vector<int>& x) {
  std::vector<int> y;
  switch (rule.family) {
    case TaskFamily::kTokenMapping: {
      if (static_cast<int>(x.size()) != config.mapping_arity)
        throw FormatError("token-mapping: input length " + std::to_string(x.size()));
      for (int t : x) {
        const int s = input_index(t);
        auto it = std::find(rule.subset.begin(), rule.subset.end(), s);
        if (it == rule.subset.end()) throw FormatError("token-mapping: symbol outside the rule domain");
        y.push_back(Vocabulary::output(rule.image[static_cast<size_t>(it - rule.subset.begin())]));
      }
      break;
    }
    case TaskFamily::kModularAffine: {
      if (static_cast<int>(x.size()) != config.modular_digits)
        throw FormatError("modular-affine: input length " + std::to_string(x.size()));
      int v = 0;
      for (int t : x) {
        const int d = input_index(t);
        if (d >= config.modular_base) throw FormatError("modular-affine: digit out of range");
        v = v * config.modular_base + d;
      }
      const int m = config.modulus();
      int out = (rule.a * v + rule.b) % m;
      std::vector<int> digits(static_cast<size_t>(config.modular_digits));
      for (int i = config.modular_digits - 1; i >= 0; --i) {
        digits[static_cast<size_t>(i)] = out % config.modular_base;
        out /= config.modular_base;
      }
      for (int d : digits) y.push_back(Vocabulary::output(d));
      break;
    }
    case TaskFamily::kSequenceTransform: {
      auto s = strip_arrow(x);
      if (s.empty()) throw FormatError("sequence-transform: empty input");
      for (int t : s) input_index(t);
      switch (rule.seq_op) {
        case SequenceOp::kReverse: std::reverse(s.begin(), s.end()); break;
        case SequenceOp::kRotate:
          std::rotate(s.begin(), s.begin() + static_cast<long>(rule.rotate_by % s.size()), s.end());
          break;
        case SequenceOp::kDuplicateLast: s.push_back(s.back()); break;
      }
      for (int t : s) y.push_back(Vocabulary::output(t - Vocabulary::kInputBase));
      break;
    }
    case TaskFamily::kMiniGrid: {
      const Grid g = decode_grid(strip_arrow(x), false);
      if (g.empty()) throw FormatError("mini-grid: empty grid");
      y = encode_grid(apply_grid(rule, g), true);
      break;
    }
  }
  y.push_back(Vocabulary::kStop);
  return y;
}

namespace {

RuleDescriptor draw_rule(const TaskFamilyConfig& c, RngStream& rng) {
  RuleDescriptor r;
  r.family = c.family;
  switch (c.family) {
    case TaskFamily::kTokenMapping:
      r.subset = rng.sample_without_replacement(Vocabulary::kSymbols, c.mapping_subset);
      std::sort(r.subset.begin(), r.subset.end());
      r.image = rng.sample_without_replacement(Vocabulary::kSymbols, c.mapping_subset);
      break;
    case TaskFamily::kModularAffine: {
      const int m = c.modulus();
      r.a = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(m - 1)));
      r.b = static_cast<int>(rng.below(static_cast<uint64_t>(m)));
      break;
    }
    case TaskFamily::kSequenceTransform:
      r.subset = rng.sample_without_replacement(Vocabulary::kSymbols, c.seq_alphabet);
      std::sort(r.subset.begin(), r.subset.end());
      r.seq_op = static_cast<SequenceOp>(rng.below(3));
      r.rotate_by = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(c.seq_min_len - 1)));
      break;
    case TaskFamily::kMiniGrid:
      r.subset = rng.sample_without_replacement(Vocabulary::kSymbols, c.grid_colors);
      r.grid_op = static_cast<GridOp>(rng.below(3));
      if (r.grid_op == GridOp::kRecolor) {
        // Permutation of the non-background colors, never the identity.
        r.image.resize(static_cast<size_t>(c.grid_colors));
        std::iota(r.image.begin(), r.image.end(), 0);
        while (std::is_sorted(r.image.begin(), r.image.end())) rng.shuffle(r.image.begin() + 1, r.image.end());
      }
      break;
  }
  return r;
}

std::vector<int> draw_input(const TaskFamilyConfig& c, const RuleDescriptor& r, RngStream& rng) {
  std::vector<int> x;
  switch (c.family) {
    case TaskFamily::kTokenMapping:
      for (int i : rng.sample_without_replacement(c.mapping_subset, c.mapping_arity))
        x.push_back(Vocabulary::input(r.subset[static_cast<size_t>(i)]));
      break;
    case TaskFamily::kModularAffine: {
      int v = static_cast<int>(rng.below(static_cast<uint64_t>(c.modulus())));
      x.assign(static_cast<size_t>(c.modular_digits), 0);
      for (int i = c.modular_digits - 1; i >= 0; --i) {
        x[static_cast<size_t>(i)] = Vocabulary::input(v % c.modular_base);
        v /= c.modular_base;
      }
      break;
    }
    case TaskFamily::kSequenceTransform: {
      const int len = c.seq_min_len + static_cast<int>(rng.below(static_cast<uint64_t>(c.seq_max_len - c.seq_min_len + 1)));
      for (int i = 0; i < len; ++i)
        x.push_back(Vocabulary::input(r.subset[rng.below(r.subset.size())]));
      x.push_back(Vocabulary::kArrow);
      break;
    }
    case TaskFamily::kMiniGrid: {
      auto span = [&] { return c.grid_min + static_cast<int>(rng.below(static_cast<uint64_t>(c.grid_max - c.grid_min + 1))); };
      const int rows = span(), cols = span();
      const int bg = r.subset[0];
      auto fg = [&] { return r.subset[1 + rng.below(r.subset.size() - 1)]; };
      Grid g(static_cast<size_t>(rows), std::vector<int>(static_cast<size_t>(cols), bg));
      if (r.grid_op == GridOp::kCrop) {
        const int h = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(rows - 1 > 0 ? rows - 1 : 1)));
        const int w = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(cols - 1 > 0 ? cols - 1 : 1)));
        const int r0 = static_cast<int>(rng.below(static_cast<uint64_t>(rows - h + 1)));
        const int c0 = static_cast<int>(rng.below(static_cast<uint64_t>(cols - w + 1)));
        for (int i = r0; i < r0 + h; ++i)
          for (int j = c0; j < c0 + w; ++j) g[static_cast<size_t>(i)][static_cast<size_t>(j)] = fg();
      } else {
        bool any = false;
        for (auto& row : g)
          for (auto& cell : row)
            if (rng.bernoulli(0.6)) cell = fg(), any = true;
        if (!any) g[0][0] = fg();
      }
      x = encode_grid(g, false);
      x.push_back(Vocabulary::kArrow);
      break;
    }
  }
  return x;
}

std::vector<std::vector<int>> draw_distinct_inputs(const TaskFamilyConfig& c, const RuleDescriptor& r,
                                                   RngStream& rng, int count,
                                                   const std::set<std::vector<int>>& exclude) {
  std::set<std::vector<int>> seen = exclude;
  std::vector<std::vector<int>> out;
  int attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > 10000 + 100 * count)
      throw DegenerateConfigError(std::string(family_name(c.family)) + ": cannot draw enough distinct inputs");
    auto x = draw_input(c, r, rng);
    if (seen.insert(x).second) out.push_back(std::move(x));
  }
  return out;
}

std::vector<std::vector<int>> make_options(const TaskFamilyConfig& c, const RuleDescriptor& r,
                                           const std::vector<int>& truth, RngStream& rng, int& answer) {
  std::vector<std::vector<int>> opts{truth};
  int attempts = 0;
  while (static_cast<int>(opts.size()) < c.num_options) {
    if (++attempts > 10000) throw DegenerateConfigError("cannot build enough distinct options");
    std::vector<int> cand;
    switch (c.family) {
      case TaskFamily::kTokenMapping:
        if (c.image_distractors) {
          for (int i : rng.sample_without_replacement(c.mapping_subset, c.mapping_arity))
            cand.push_back(Vocabulary::output(r.image[static_cast<size_t>(i)]));
        } else {
          for (int i : rng.sample_without_replacement(Vocabulary::kSymbols, c.mapping_arity))
            cand.push_back(Vocabulary::output(i));
        }
        cand.push_back(Vocabulary::kStop);
        break;
      default: {
        // Correct output of some other input under the same rule.
        cand = rule_oracle(r, c, draw_input(c, r, rng));
        break;
      }
    }
    if (std::find(opts.begin(), opts.end(), cand) == opts.end()) opts.push_back(std::move(cand));
  }
  std::vector<int> order(opts.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<int>> shuffled;
  for (size_t i = 0; i < order.size(); ++i) {
    if (order[i] == 0) answer = static_cast<int>(i);
    shuffled.push_back(opts[static_cast<size_t>(order[i])]);
  }
  return shuffled;
}

// Demonstration inputs distinct from the queries. For token-mapping every
// symbol used by a query also occurs in some demonstration input.
std::vector<std::vector<int>> draw_demo_inputs(const TaskFamilyConfig& c, const RuleDescriptor& r,
                                               const std::vector<QueryItem>& queries, RngStream& rng) {
  std::set<std::vector<int>> exclude;
  for (const auto& q : queries) exclude.insert(q.x);
  if (c.family != TaskFamily::kTokenMapping) return draw_distinct_inputs(c, r, rng, c.k, exclude);

  std::vector<std::vector<int>> all;
  // Enumerate ordered tuples of distinct subset symbols.
  std::vector<int> cur;
  std::function<void()> rec = [&] {
    if (static_cast<int>(cur.size()) == c.mapping_arity) {
      std::vector<int> x;
      for (int i : cur) x.push_back(Vocabulary::input(r.subset[static_cast<size_t>(i)]));
      if (!exclude.count(x)) all.push_back(std::move(x));
      return;
    }
    for (int i = 0; i < c.mapping_subset; ++i) {
      if (std::find(cur.begin(), cur.end(), i) != cur.end()) continue;
      cur.push_back(i);
      rec();
      cur.pop_back();
    }
  };
  rec();
  rng.shuffle(all.begin(), all.end());
  std::set<int> need;
  for (const auto& q : queries) need.insert(q.x.begin(), q.x.end());
  std::vector<std::vector<int>> chosen;
  std::vector<bool> used(all.size(), false);
  while (!need.empty() && static_cast<int>(chosen.size()) < c.k) {
    size_t best = all.size();
    int best_gain = 0;
    for (size_t i = 0; i < all.size(); ++i) {
      if (used[i]) continue;
      int gain = 0;
      for (int t : all[i]) gain += static_cast<int>(need.count(t));
      if (gain > best_gain) best_gain = gain, best = i;
    }
    if (best == all.size()) break;
    used[best] = true;
    for (int t : all[best]) need.erase(t);
    chosen.push_back(all[best]);
  }
  for (size_t i = 0; i < all.size() && static_cast<int>(chosen.size()) < c.k; ++i) {
    if (!used[i]) used[i] = true, chosen.push_back(all[i]);
  }
  rng.shuffle(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace

RuleDescriptor sample_rule(const TaskFamilyConfig& config, RngStream rng, RulePool pool) {
  config.validate();
  for (int attempt = 0; attempt < 100000; ++attempt) {
    auto r = draw_rule(config, rng);
    if (rule_pool(r) == pool) return r;
  }
  throw DegenerateConfigError("no rule found in the requested pool");
}

TaskInstance gen_task_seeded(const TaskFamilyConfig& config, RngStream rng, uint64_t demo_seed,
                             RulePool pool) {
  TaskInstance t;
  t.config = config;
  t.id = rng.key();
  t.seed = demo_seed;
  t.rule = sample_rule(config, rng.split("rule"), pool);
  RngStream qrng = rng.split("queries");
  for (auto& x : draw_distinct_inputs(config, t.rule, qrng, config.num_queries, {})) {
    QueryItem q;
    q.y = rule_oracle(t.rule, config, x);
    q.x = std::move(x);
    if (config.multiple_choice) q.options = make_options(config, t.rule, q.y, qrng, q.answer);
    t.queries.push_back(std::move(q));
  }
  RngStream drng = rng.split("demos").split(demo_seed);
  for (auto& x : draw_demo_inputs(config, t.rule, t.queries, drng)) {
    auto y = rule_oracle(t.rule, config, x);
    t.demos.pairs.push_back({std::move(x), std::move(y)});
  }
  return t;
}

QueryItem make_query(const TaskFamilyConfig& config, const RuleDescriptor& rule, std::vector<int> x,
                     RngStream& rng) {
  QueryItem q;
  q.y = rule_oracle(rule, config, x);
  q.x = std::move(x);
  if (config.multiple_choice) q.options = make_options(config, rule, q.y, rng, q.answer);
  return q;
}

TaskInstance gen_task(const TaskFamilyConfig& config, RngStream rng, RulePool pool) {
  return gen_task_seeded(config, rng, 0, pool);
}

// ---- serialization ----

namespace {

json config_json(const TaskFamilyConfig& c) {
  return {{"family", family_name(c.family)}, {"k", c.k}, {"num_queries", c.num_queries},
          {"multiple_choice", c.multiple_choice}, {"num_options", c.num_options},
          {"mapping_subset", c.mapping_subset}, {"mapping_arity", c.mapping_arity},
          {"image_distractors", c.image_distractors},
          {"modular_base", c.modular_base}, {"modular_digits", c.modular_digits},
          {"seq_alphabet", c.seq_alphabet}, {"seq_min_len", c.seq_min_len},
          {"seq_max_len", c.seq_max_len}, {"grid_min", c.grid_min}, {"grid_max", c.grid_max},
          {"grid_colors", c.grid_colors}};
}

TaskFamilyConfig config_from(const json& j) {
  TaskFamilyConfig c;
  c.family = family_from_name(j.at("family").get<std::string>());
  c.k = j.at("k");
  c.num_queries = j.at("num_queries");
  c.multiple_choice = j.at("multiple_choice");
  c.num_options = j.at("num_options");
  c.mapping_subset = j.at("mapping_subset");
  c.mapping_arity = j.at("mapping_arity");
  c.image_distractors = j.at("image_distractors");
  c.modular_base = j.at("modular_base");
  c.modular_digits = j.at("modular_digits");
  c.seq_alphabet = j.at("seq_alphabet");
  c.seq_min_len = j.at("seq_min_len");
  c.seq_max_len = j.at("seq_max_len");
  c.grid_min = j.at("grid_min");
  c.grid_max = j.at("grid_max");
  c.grid_colors = j.at("grid_colors");
  return c;
}

}  // namespace

std::string task_to_json(const TaskInstance& t) {
  json j;
  j["id"] = t.id;
  j["seed"] = t.seed;
  j["config"] = config_json(t.config);
  j["rule"] = {{"family", family_name(t.rule.family)}, {"subset", t.rule.subset},
               {"image", t.rule.image}, {"a", t.rule.a}, {"b", t.rule.b},
               {"seq_op", static_cast<int>(t.rule.seq_op)}, {"rotate_by", t.rule.rotate_by},
               {"grid_op", static_cast<int>(t.rule.grid_op)}};
  json demos = json::array();
  for (const auto& p : t.demos.pairs) demos.push_back({{"x", p.x}, {"y", p.y}});
  j["demos"] = demos;
  json qs = json::array();
  for (const auto& q : t.queries)
    qs.push_back({{"x", q.x}, {"y", q.y}, {"options", q.options}, {"answer", q.answer}});
  j["queries"] = qs;
  return j.dump();
}

TaskInstance task_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    TaskInstance t;
    t.id = j.at("id");
    t.seed = j.at("seed");
    t.config = config_from(j.at("config"));
    const auto& r = j.at("rule");
    t.rule.family = family_from_name(r.at("family").get<std::string>());
    t.rule.subset = r.at("subset").get<std::vector<int>>();
    t.rule.image = r.at("image").get<std::vector<int>>();
    t.rule.a = r.at("a");
    t.rule.b = r.at("b");
    t.rule.seq_op = static_cast<SequenceOp>(r.at("seq_op").get<int>());
    t.rule.rotate_by = r.at("rotate_by");
    t.rule.grid_op = static_cast<GridOp>(r.at("grid_op").get<int>());
    for (const auto& p : j.at("demos"))
      t.demos.pairs.push_back({p.at("x").get<std::vector<int>>(), p.at("y").get<std::vector<int>>()});
    for (const auto& q : j.at("queries")) {
      QueryItem item;
      item.x = q.at("x").get<std::vector<int>>();
      item.y = q.at("y").get<std::vector<int>>();
      item.options = q.at("options").get<std::vector<std::vector<int>>>();
      item.answer = q.at("answer");
      t.queries.push_back(std::move(item));
    }
    return t;
  } catch (const json::exception& e) {
    throw FormatError(std::string("task record: ") + e.what());
  }
}

}  // namespace icolab
