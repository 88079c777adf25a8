#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>

#include <unistd.h>

#include "listen/gridsearch.hpp"

namespace listenkit {
namespace {

// ---------------------------------------------------------------- grids

TEST(Grid, ImpactTable) {
  const auto g = enumerate_grid(impact_grid());
  ASSERT_EQ(g.size(), 12u);
  EXPECT_EQ(g.front().name, "I01");
  EXPECT_EQ(g.back().name, "I12");
  const auto& i05 = g[4];
  EXPECT_EQ(i05.name, "I05");
  EXPECT_EQ(i05.embed_dim, 192u);
  EXPECT_EQ(i05.num_layers, 6u);
  EXPECT_EQ(i05.expansion, 4u);
  EXPECT_EQ(i05.activation, Activation::gelu);
}

TEST(Grid, ListenTable) {
  const auto g = enumerate_grid(listen_grid());
  ASSERT_EQ(g.size(), 27u);
  EXPECT_EQ(g[18].name, "L19");
  EXPECT_EQ(std::tie(g[18].embed_dim, g[18].num_layers, g[18].expansion), std::make_tuple(64u, 2u, 1u));
  EXPECT_EQ(g[21].name, "L22");
  EXPECT_EQ(std::tie(g[21].embed_dim, g[21].num_layers, g[21].expansion), std::make_tuple(64u, 4u, 1u));
  EXPECT_EQ(g[0].activation, Activation::relu);
}

TEST(Grid, IdsAndTuplesAreBijective) {
  for (const auto& spec : {impact_grid(), listen_grid()}) {
    std::set<std::string> ids;
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> tuples;
    for (const auto& c : enumerate_grid(spec)) {
      EXPECT_TRUE(ids.insert(c.name).second);
      EXPECT_TRUE(tuples.insert({c.embed_dim, c.num_layers, c.expansion}).second);
      EXPECT_EQ(find_config(spec, c.name), c);
    }
    EXPECT_EQ(ids.size(), spec.size());
    EXPECT_THROW(find_config(spec, spec.family + "99"), ConfigError);
  }
}

TEST(Grid, SingletonAndEmptyAxes) {
  EXPECT_EQ(enumerate_grid({"S", {32}, {2}, {2}, Activation::relu}).size(), 1u);
  EXPECT_THROW(enumerate_grid({"S", {}, {2}, {2}, Activation::relu}), ConfigError);
  EXPECT_THROW(enumerate_grid({"S", {32}, {}, {2}, Activation::relu}), ConfigError);
  EXPECT_THROW(enumerate_grid({"S", {32}, {2}, {}, Activation::relu}), ConfigError);
}

TEST(Grid, ParamsOfEveryConfigMatchEnumeration) {
  for (const auto& spec : {impact_grid(), listen_grid()}) {
    for (const auto& c : enumerate_grid(spec)) {
      const auto b = build_backbone<float>(c, 1);
      EXPECT_EQ(count_params(b, ParamScope::blocks), block_param_formula(c)) << c.name;
    }
  }
}

// ---------------------------------------------------------------- selection

TrialResult row(std::string id, double mean, double zs, std::size_t params, double latency = 1.0) {
  TrialResult r;
  r.id = std::move(id);
  r.mean_f1 = mean;
  r.zero_shot_f1 = zs;
  r.params = params;
  r.latency_ms = {latency, latency, latency};
  return r;
}

TEST(Select, ParentScenarioPrefersGeneralization) {
  const std::vector<TrialResult> t{row("I09", 0.900, 0.880, 1000), row("I05", 0.8985, 0.884, 900)};
  EXPECT_EQ(select_config(t, {0.0015, {Tiebreak::zero_shot_desc}}), "I05");
  EXPECT_EQ(select_config(t, SelectionPolicy::parent_family()), "I05");
  EXPECT_EQ(select_config(t, {0.0, {Tiebreak::zero_shot_desc}}), "I09");
}

TEST(Select, ChildScenarioPrefersEfficiency) {
  const std::vector<TrialResult> t{row("L22", 0.870, 0.5, 100864), row("L19", 0.869, 0.5, 50432)};
  EXPECT_EQ(select_config(t, {0.001, {Tiebreak::params_asc}}), "L19");
  EXPECT_EQ(select_config(t, SelectionPolicy::child_family()), "L19");
  EXPECT_EQ(select_config(t, {0.0, {Tiebreak::params_asc}}), "L22");
}

TEST(Select, FinalTieAndFailures) {
  // identical on every key: smallest params, then lowest id
  std::vector<TrialResult> t{row("A02", 0.8, 0.8, 10), row("A01", 0.8, 0.8, 10), row("A03", 0.8, 0.8, 9)};
  EXPECT_EQ(select_config(t, {0.0, {Tiebreak::zero_shot_desc}}), "A03");
  t.pop_back();
  EXPECT_EQ(select_config(t, {0.0, {}}), "A01");
  t.push_back(row("A00", 0.99, 0.99, 1));
  t.back().ok = false;
  EXPECT_EQ(select_config(t, {0.0, {}}), "A01");
  EXPECT_EQ(select_config({row("X", 0.5, 0.1, 5, 3.0), row("Y", 0.5, 0.1, 5, 2.0)}, {0.0, {Tiebreak::latency_asc}}), "Y");
  EXPECT_THROW(select_config({}, {}), InputError);
  EXPECT_THROW(select_config({t.back()}, {}), InputError);
  EXPECT_THROW(select_config(t, {-0.1, {}}), ConfigError);
}

std::vector<TrialResult> random_table(Prng& prng, std::size_t n) {
  std::vector<TrialResult> t;
  for (std::size_t i = 0; i < n; ++i) {
    // coarse values so ties on every key actually happen
    t.push_back(row(grid_id("R", i), 0.8 + 0.001 * static_cast<double>(prng.index(5)), 0.01 * static_cast<double>(prng.index(4)),
                    1 + prng.index(3), static_cast<double>(prng.index(3))));
  }
  return t;
}

TEST(Select, PermutationInvariant) {
  const std::vector<TrialResult> parent{row("I09", 0.900, 0.880, 1000), row("I05", 0.8985, 0.884, 900),
                                        row("I01", 0.850, 0.900, 100), row("I12", 0.8990, 0.870, 2000)};
  const std::vector<TrialResult> child{row("L22", 0.870, 0.5, 100864), row("L19", 0.869, 0.5, 50432),
                                       row("L01", 0.700, 0.6, 1000), row("L27", 0.8695, 0.5, 300000)};
  Prng prng(4);
  for (int i = 0; i < 100; ++i) {
    auto p = parent, c = child;
    prng.shuffle(p.begin(), p.end());
    prng.shuffle(c.begin(), c.end());
    EXPECT_EQ(select_config(p, SelectionPolicy::parent_family()), "I05");
    EXPECT_EQ(select_config(c, SelectionPolicy::child_family()), "L19");
  }
  const SelectionPolicy mixed{0.002, {Tiebreak::latency_asc, Tiebreak::zero_shot_desc}};
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_table(prng, 12);
    const auto first = select_config(t, mixed);
    for (int i = 0; i < 100; ++i) {
      prng.shuffle(t.begin(), t.end());
      ASSERT_EQ(select_config(t, mixed), first);
    }
  }
}

TEST(Select, GrowingEpsilonKeepsPreviousChoice) {
  Prng prng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = random_table(prng, 8);
    const SelectionPolicy p{0.001 * static_cast<double>(prng.index(4)), {Tiebreak::params_asc}};
    const auto chosen = select_config(t, p);
    for (double extra : {0.0005, 0.001, 0.01, 1.0}) {
      const auto cand = selection_candidates(t, p.epsilon + extra);
      EXPECT_TRUE(std::any_of(cand.begin(), cand.end(), [&](const TrialResult* r) { return r->id == chosen; }));
    }
  }
}

TEST(Select, PolicyJson) {
  const SelectionPolicy p{0.002, {Tiebreak::latency_asc, Tiebreak::params_asc}};
  const auto back = nlohmann::json(p).get<SelectionPolicy>();
  EXPECT_EQ(back.epsilon, p.epsilon);
  EXPECT_EQ(back.tiebreak, p.tiebreak);
  EXPECT_THROW(nlohmann::json::parse(R"({"tiebreak": ["fastest"]})").get<SelectionPolicy>(), ConfigError);
}

// ---------------------------------------------------------------- trials

Task random_task(std::string name, std::size_t classes, std::uint64_t seed) {
  Prng prng(seed);
  Task t{std::move(name), classes, {}, {}};
  for (std::size_t i = 0; i < 3 * classes; ++i) {
    Tensor<float> im({128, 128});
    const int label = static_cast<int>(i % classes);
    for (std::size_t r = 0; r < 128; ++r)
      for (std::size_t k = 0; k < 128; ++k) im(r, k) = static_cast<float>((r / 16 == static_cast<std::size_t>(label)) + 0.1 * prng.normal());
    (i < 2 * classes ? t.train : t.test).push_back({std::move(im), label, {}});
  }
  return t;
}

class RunGridTest : public ::testing::Test {
 protected:
  void SetUp() override {
    store_ = std::filesystem::temp_directory_path() / ("listen_grid_" + std::to_string(::getpid()));
    std::filesystem::remove_all(store_);
    suite_.tasks = {random_task("a", 2, 1), random_task("b", 3, 2)};
    suite_.zero_shot = random_task("z", 2, 3);
    budget_.finetune.epochs = 2;
    budget_.finetune.batch_size = 4;
    budget_.latency_clips = 3;
    budget_.seed = 9;
    budget_.store = store_;
  }
  void TearDown() override { std::filesystem::remove_all(store_); }

  std::filesystem::path store_;
  CorpusSuite suite_;
  GridBudget budget_;
  const std::vector<ModelConfig> grid_ = enumerate_grid({"T", {8, 16}, {1}, {1, 2}, Activation::relu});
};

TEST_F(RunGridTest, RecordsEveryConfigAndResumes) {
  int built = 0;
  budget_.init = [&](const ModelConfig& c, std::uint64_t seed) {
    ++built;
    return build_backbone<float>(c, seed);
  };
  const auto first = run_grid(grid_, suite_, budget_);
  ASSERT_EQ(first.size(), grid_.size());
  EXPECT_EQ(built, 4);
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_TRUE(first[i].ok) << first[i].error;
    EXPECT_EQ(first[i].id, grid_[i].name);
    EXPECT_EQ(first[i].params, block_param_formula(grid_[i]));
    EXPECT_EQ(first[i].task_f1.size(), 2u);
    EXPECT_NO_THROW(first[i].validate());
  }

  std::size_t reused = 0;
  const auto second = run_grid(grid_, suite_, budget_, [&](const TrialResult&, bool r) { reused += r; });
  EXPECT_EQ(built, 4);
  EXPECT_EQ(reused, 4u);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(nlohmann::json(second[i]), nlohmann::json(first[i]));

  // a different budget is a different key
  budget_.finetune.epochs = 1;
  run_grid({grid_[0]}, suite_, budget_);
  EXPECT_EQ(built, 5);
}

TEST_F(RunGridTest, TrialsAreSeededPerConfig) {
  budget_.store.clear();
  const auto a = run_grid({grid_[1]}, suite_, budget_);
  const auto b = run_grid(grid_, suite_, budget_);
  EXPECT_EQ(a[0].task_f1, b[1].task_f1);
  EXPECT_EQ(a[0].zero_shot_f1, b[1].zero_shot_f1);
  const auto c = run_grid(grid_, suite_, budget_);
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b[i].task_f1, c[i].task_f1);
    EXPECT_EQ(b[i].zero_shot_f1, c[i].zero_shot_f1);
  }
}

TEST_F(RunGridTest, FailedTrialIsFlaggedAndRetried) {
  bool fail = true;
  budget_.init = [&](const ModelConfig& c, std::uint64_t seed) {
    if (fail && c.name == "T02") throw InternalError("boom");
    return build_backbone<float>(c, seed);
  };
  const auto r = run_grid(grid_, suite_, budget_);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_FALSE(r[1].ok);
  EXPECT_EQ(r[1].error, "boom");
  EXPECT_TRUE(r[0].ok && r[2].ok && r[3].ok);
  EXPECT_NE(select_config(r, {1.0, {Tiebreak::params_asc}}), "T02");

  fail = false;
  std::vector<std::string> recomputed;
  const auto again = run_grid(grid_, suite_, budget_, [&](const TrialResult& t, bool reused) {
    if (!reused) recomputed.push_back(t.id);
  });
  EXPECT_EQ(recomputed, std::vector<std::string>{"T02"});
  EXPECT_TRUE(again[1].ok);
}

TEST_F(RunGridTest, CorruptRecordIsRecomputedAndCsvExported) {
  const auto r = run_grid({grid_[0]}, suite_, budget_);
  const auto path = trial_path(store_, "T01", corpus_hash(suite_, budget_));
  ASSERT_TRUE(std::filesystem::exists(path));
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  std::ofstream(path) << "{\"id\": ";
  int built = 0;
  budget_.init = [&](const ModelConfig& c, std::uint64_t seed) {
    ++built;
    return build_backbone<float>(c, seed);
  };
  run_grid({grid_[0]}, suite_, budget_);
  EXPECT_EQ(built, 1);

  const auto csv = store_ / "results.csv";
  write_results_csv(csv, r);
  std::ifstream in(csv);
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "id,dims,layers,expansion,mean_f1,zero_shot_f1,params,latency_mean_ms,latency_min_ms,latency_max_ms,status");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("T01,8,1,1,", 0), 0u);
  EXPECT_EQ(line.substr(line.size() - 3), ",ok");
}

TEST_F(RunGridTest, RejectsEmptySuites) {
  CorpusSuite empty;
  EXPECT_THROW(run_grid(grid_, empty, budget_), InputError);
  suite_.zero_shot.test.clear();
  EXPECT_THROW(run_grid(grid_, suite_, budget_), InputError);
}

}  // namespace
}  // namespace listenkit
