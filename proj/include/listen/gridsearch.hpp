#pragma once

// Configuration grids, resumable fine-tune/evaluate trials and
// epsilon-lexicographic model selection.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "listen/finetune.hpp"
#include "listen/synth.hpp"

namespace listenkit {

// ---------------------------------------------------------------- grids

struct GridSpec {
  std::string family;
  std::vector<std::size_t> embed_dims;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> expansions;
  Activation activation = Activation::relu;

  std::size_t size() const { return embed_dims.size() * layers.size() * expansions.size(); }
};

// Parent family: embedding width x depth at expansion 4.
inline GridSpec impact_grid() { return {"I", {128, 192, 256, 384}, {4, 6, 8}, {4}, Activation::gelu}; }

// Child family.
inline GridSpec listen_grid() { return {"L", {16, 32, 64}, {2, 4, 6}, {1, 2, 4}, Activation::relu}; }

inline std::string grid_id(const std::string& family, std::size_t index) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%02zu", index + 1);
  return family + buf;
}

// Cartesian product with dims outermost, then layers, then expansion.
inline std::vector<ModelConfig> enumerate_grid(const GridSpec& spec) {
  if (spec.family.empty()) throw ConfigError("grid: empty family name");
  if (spec.embed_dims.empty() || spec.layers.empty() || spec.expansions.empty()) throw ConfigError("grid: empty axis");
  if (spec.size() > 99) throw ConfigError("grid: more than 99 configurations");
  std::vector<ModelConfig> out;
  for (auto d : spec.embed_dims)
    for (auto l : spec.layers)
      for (auto f : spec.expansions) {
        auto c = ModelConfig::make(grid_id(spec.family, out.size()), d, l, f, spec.activation);
        c.validate();
        out.push_back(c);
      }
  return out;
}

inline ModelConfig find_config(const GridSpec& spec, const std::string& id) {
  for (auto& c : enumerate_grid(spec)) {
    if (c.name == id) return c;
  }
  throw ConfigError("grid " + spec.family + ": no configuration '" + id + "'");
}

// ---------------------------------------------------------------- results

struct LatencySummary {
  double mean = 0.0, min = 0.0, max = 0.0;  // milliseconds
};

struct TrialResult {
  std::string id;
  ModelConfig config;
  double mean_f1 = 0.0;
  double zero_shot_f1 = 0.0;
  std::size_t params = 0;  // encoder-block parameters
  LatencySummary latency_ms;
  std::vector<double> task_f1;
  bool ok = true;
  std::string error;

  void validate() const {
    if (!ok) return;
    if (mean_f1 < 0 || mean_f1 > 1 || zero_shot_f1 < 0 || zero_shot_f1 > 1) throw DomainError("trial " + id + ": F1 outside [0,1]");
    if (params == 0) throw DomainError("trial " + id + ": zero parameters");
    if (!(latency_ms.min <= latency_ms.mean && latency_ms.mean <= latency_ms.max)) {
      throw DomainError("trial " + id + ": latency min <= mean <= max violated");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrialResult& r) {
  j = {{"id", r.id},
       {"config", r.config},
       {"mean_f1", r.mean_f1},
       {"zero_shot_f1", r.zero_shot_f1},
       {"params", r.params},
       {"latency_ms", {{"mean", r.latency_ms.mean}, {"min", r.latency_ms.min}, {"max", r.latency_ms.max}}},
       {"task_f1", r.task_f1},
       {"ok", r.ok},
       {"error", r.error}};
}

inline void from_json(const nlohmann::json& j, TrialResult& r) {
  r.id = j.at("id").get<std::string>();
  r.config = j.at("config").get<ModelConfig>();
  r.mean_f1 = j.at("mean_f1").get<double>();
  r.zero_shot_f1 = j.at("zero_shot_f1").get<double>();
  r.params = j.at("params").get<std::size_t>();
  const auto& l = j.at("latency_ms");
  r.latency_ms = {l.at("mean").get<double>(), l.at("min").get<double>(), l.at("max").get<double>()};
  r.task_f1 = j.value("task_f1", std::vector<double>{});
  r.ok = j.value("ok", true);
  r.error = j.value("error", std::string{});
}

inline void write_results_csv(const std::filesystem::path& path, const std::vector<TrialResult>& results) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "id,dims,layers,expansion,mean_f1,zero_shot_f1,params,latency_mean_ms,latency_min_ms,latency_max_ms,status\n";
  for (const auto& r : results) {
    out << r.id << ',' << r.config.embed_dim << ',' << r.config.num_layers << ',' << r.config.expansion << ',' << r.mean_f1 << ','
        << r.zero_shot_f1 << ',' << r.params << ',' << r.latency_ms.mean << ',' << r.latency_ms.min << ',' << r.latency_ms.max
        << ',' << (r.ok ? "ok" : "failed") << '\n';
  }
}

// ---------------------------------------------------------------- selection

enum class Tiebreak { zero_shot_desc, params_asc, latency_asc };

inline std::string to_string(Tiebreak t) {
  switch (t) {
    case Tiebreak::zero_shot_desc: return "zero_shot_desc";
    case Tiebreak::params_asc: return "params_asc";
    case Tiebreak::latency_asc: return "latency_asc";
  }
  return "?";
}

inline Tiebreak tiebreak_from_string(const std::string& s) {
  for (auto t : {Tiebreak::zero_shot_desc, Tiebreak::params_asc, Tiebreak::latency_asc}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown tiebreak '" + s + "'");
}

struct SelectionPolicy {
  double epsilon = 0.0;
  std::vector<Tiebreak> tiebreak;

  // Gaps like 0.900 - 0.8985 are not exact in binary; comparisons against
  // epsilon allow this much slack.
  static constexpr double kSlack = 1e-9;

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("selection: epsilon must be >= 0");
  }

  static SelectionPolicy parent_family() { return {0.0015, {Tiebreak::zero_shot_desc}}; }
  static SelectionPolicy child_family() { return {0.001, {Tiebreak::params_asc}}; }
};

inline void to_json(nlohmann::json& j, const SelectionPolicy& p) {
  j = {{"epsilon", p.epsilon}, {"tiebreak", nlohmann::json::array()}};
  for (auto t : p.tiebreak) j["tiebreak"].push_back(to_string(t));
}

inline void from_json(const nlohmann::json& j, SelectionPolicy& p) {
  p.epsilon = j.value("epsilon", 0.0);
  p.tiebreak.clear();
  for (const auto& t : j.value("tiebreak", nlohmann::json::array())) p.tiebreak.push_back(tiebreak_from_string(t.get<std::string>()));
  p.validate();
}

// Successful results within epsilon of the best mean F1.
inline std::vector<const TrialResult*> selection_candidates(const std::vector<TrialResult>& results, double epsilon) {
  double best = -1.0;
  for (const auto& r : results) {
    if (r.ok) best = std::max(best, r.mean_f1);
  }
  std::vector<const TrialResult*> out;
  for (const auto& r : results) {
    if (r.ok && best - r.mean_f1 <= epsilon + SelectionPolicy::kSlack) out.push_back(&r);
  }
  return out;
}

inline std::string select_config(const std::vector<TrialResult>& results, const SelectionPolicy& policy) {
  policy.validate();
  const auto cand = selection_candidates(results, policy.epsilon);
  if (cand.empty()) throw InputError("select_config: no successful trials");
  auto better = [&](const TrialResult* a, const TrialResult* b) {
    for (auto t : policy.tiebreak) {
      switch (t) {
        case Tiebreak::zero_shot_desc:
          if (a->zero_shot_f1 != b->zero_shot_f1) return a->zero_shot_f1 > b->zero_shot_f1;
          break;
        case Tiebreak::params_asc:
          if (a->params != b->params) return a->params < b->params;
          break;
        case Tiebreak::latency_asc:
          if (a->latency_ms.mean != b->latency_ms.mean) return a->latency_ms.mean < b->latency_ms.mean;
          break;
      }
    }
    if (a->params != b->params) return a->params < b->params;
    return a->id < b->id;
  };
  return (*std::min_element(cand.begin(), cand.end(), better))->id;
}

// ---------------------------------------------------------------- trials

struct Task {
  std::string name;
  std::size_t num_classes = 0;
  Dataset<float> train;
  Dataset<float> test;
};

// Tasks scored for mean F1 plus one held-out task for zero-shot F1.
struct CorpusSuite {
  std::vector<Task> tasks;
  Task zero_shot;
};

// Synthetic suite: `tasks` related tasks plus one more variant held out as
// the zero-shot task.
inline CorpusSuite synthetic_suite(std::size_t tasks, int classes, std::size_t train_per_class, std::size_t test_per_class,
                                   Prng& prng, const SpectrogramFrontend& frontend) {
  if (tasks == 0 || classes < 2) throw ConfigError("synthetic suite: need >= 1 task and >= 2 classes");
  auto make = [&](int variant) {
    const auto specs = synthetic_task_specs(variant, classes);
    return Task{"synthetic-" + std::to_string(variant), static_cast<std::size_t>(classes),
                make_dataset<float>(synth_corpus(specs, train_per_class, prng), frontend),
                make_dataset<float>(synth_corpus(specs, test_per_class, prng), frontend)};
  };
  CorpusSuite suite;
  for (std::size_t t = 0; t < tasks; ++t) suite.tasks.push_back(make(static_cast<int>(t)));
  suite.zero_shot = make(static_cast<int>(tasks));
  return suite;
}

// Builds the starting backbone for a trial, e.g. by distilling from a parent.
using BackboneInit = std::function<Backbone<float>(const ModelConfig&, std::uint64_t seed)>;

struct GridBudget {
  FinetuneConfig finetune;
  std::size_t latency_clips = 10;
  std::uint64_t seed = 0;
  std::filesystem::path store;  // empty: no persistence
  BackboneInit init;            // empty: random initialization
};

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 0x100000001b3ULL;
  return h;
}

// Identifies the corpus and training budget a trial result depends on.
inline std::uint64_t corpus_hash(const CorpusSuite& suite, const GridBudget& budget) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto add_set = [&](const Dataset<float>& set) {
    for (const auto& ex : set) {
      h = fnv1a(ex.image.data(), ex.image.size() * sizeof(float), h);
      h = fnv1a(&ex.label, sizeof ex.label, h);
    }
  };
  auto add_task = [&](const Task& t) {
    h = fnv1a(t.name.data(), t.name.size(), h);
    h = fnv1a(&t.num_classes, sizeof t.num_classes, h);
    add_set(t.train);
    add_set(t.test);
  };
  for (const auto& t : suite.tasks) add_task(t);
  add_task(suite.zero_shot);
  const std::string extra = nlohmann::json{{"finetune", budget.finetune}, {"seed", budget.seed}}.dump();
  return fnv1a(extra.data(), extra.size(), h);
}

inline std::filesystem::path trial_path(const std::filesystem::path& store, const std::string& id, std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return store / (id + "-" + buf + ".json");
}

inline void write_atomically(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out << text;
    if (!out.flush()) throw IoError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline LatencySummary measure_latency(const Classifier<float>& model, const Dataset<float>& clips, std::size_t n) {
  if (clips.empty() || n == 0) throw InputError("latency: no clips");
  LatencySummary s{0.0, 1e300, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    predict(model, clips[i % clips.size()].image);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    s.mean += ms;
    s.min = std::min(s.min, ms);
    s.max = std::max(s.max, ms);
  }
  s.mean /= static_cast<double>(n);
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

// One trial: fine-tune a fresh copy of the starting backbone on each task.
// Seeds derive from the budget seed and the config id only.
inline TrialResult run_trial(const ModelConfig& cfg, const CorpusSuite& suite, const GridBudget& budget) {
  TrialResult r;
  r.id = cfg.name;
  r.config = cfg;
  const Prng root = Prng(budget.seed).fork(fnv1a(cfg.name.data(), cfg.name.size()));
  const std::uint64_t init_seed = root.fork(0).next();
  const Backbone<float> start = budget.init ? budget.init(cfg, init_seed) : build_backbone<float>(cfg, init_seed);
  if (!(start.config.embed_dim == cfg.embed_dim && start.config.num_layers == cfg.num_layers &&
        start.config.expansion == cfg.expansion)) {
    throw ConfigError("trial " + cfg.name + ": initializer returned a different architecture");
  }
  r.params = count_params(start, ParamScope::blocks);

  auto score = [&](const Task& task, std::uint64_t stream, Classifier<float>* keep) {
    Prng prng = root.fork(stream);
    Classifier<float> model{start, build_head<float>(cfg.embed_dim, task.num_classes, prng.next())};
    finetune(model, task.train, budget.finetune, prng);
    const double f1 = evaluate(model, task.test).macro;
    if (keep) *keep = std::move(model);
    return f1;
  };
  Classifier<float> last;
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) r.task_f1.push_back(score(suite.tasks[t], t + 1, &last));
  double sum = 0.0;
  for (double f : r.task_f1) sum += f;
  r.mean_f1 = sum / static_cast<double>(r.task_f1.size());
  r.zero_shot_f1 = score(suite.zero_shot, 0x7a, nullptr);
  r.latency_ms = measure_latency(last, suite.tasks.front().test, budget.latency_clips);
  r.validate();
  return r;
}

using TrialHook = std::function<void(const TrialResult&, bool reused)>;

// Runs every configuration in order. Completed trials found in the store are
// reused; failures are recorded and not persisted, so a re-run retries them.
inline std::vector<TrialResult> run_grid(const std::vector<ModelConfig>& grid, const CorpusSuite& suite, const GridBudget& budget,
                                         const TrialHook& on_trial = {}) {
  if (suite.tasks.empty()) throw InputError("grid: corpus suite has no tasks");
  for (const auto& t : suite.tasks) {
    if (t.train.empty() || t.test.empty()) throw InputError("grid: task '" + t.name + "' is empty");
  }
  if (suite.zero_shot.train.empty() || suite.zero_shot.test.empty()) throw InputError("grid: zero-shot task is empty");
  budget.finetune.validate();
  const std::uint64_t hash = corpus_hash(suite, budget);
  if (!budget.store.empty()) std::filesystem::create_directories(budget.store);

  std::vector<TrialResult> out;
  for (const auto& cfg : grid) {
    const auto path = budget.store.empty() ? std::filesystem::path{} : trial_path(budget.store, cfg.name, hash);
    if (!path.empty() && std::filesystem::exists(path)) {
      std::ifstream in(path);
      try {
        auto r = nlohmann::json::parse(in).get<TrialResult>();
        if (r.id == cfg.name && r.config == cfg) {
          out.push_back(std::move(r));
          if (on_trial) on_trial(out.back(), true);
          continue;
        }
      } catch (const nlohmann::json::exception&) {
        // unreadable record: recompute
      }
    }
    TrialResult r;
    try {
      r = run_trial(cfg, suite, budget);
      if (!path.empty()) write_atomically(path, nlohmann::json(r).dump(2));
    } catch (const std::exception& e) {
      r = TrialResult{};
      r.id = cfg.name;
      r.config = cfg;
      r.params = block_param_formula(cfg);
      r.ok = false;
      r.error = e.what();
    }
    out.push_back(std::move(r));
    if (on_trial) on_trial(out.back(), false);
  }
  return out;
}

}  // namespace listenkit
