#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <string>

#include "fixtures.hpp"
#include "tnas/search.hpp"
#include "tnas/train.hpp"

using namespace tnas;

namespace {

// Fixed pseudo-random fitness table over the whole space; distinct values so
// the global best is unique.
FitnessFn table_fitness(std::size_t blocks, std::uint64_t seed, std::map<std::string, double>* table_out = nullptr) {
  auto table = std::make_shared<std::map<std::string, double>>();
  Rng rng(seed);
  auto all = enumerate_genomes(blocks);
  std::vector<double> vals(all.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i + 1) / static_cast<double>(vals.size() + 1);
  std::shuffle(vals.begin(), vals.end(), rng);
  for (std::size_t i = 0; i < all.size(); ++i) (*table)[all[i].str()] = vals[i];
  if (table_out) *table_out = *table;
  return [table](const Genome& g) {
    const double f = table->at(g.str());
    return RecallScores{f, f, f};
  };
}

std::string best_of(const std::map<std::string, double>& table) {
  return std::max_element(table.begin(), table.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
}

}  // namespace

TEST(Fitness, PerfectPredictions) {
  const std::vector<int> y{0, 1, 2, 3, 4, 5, 6};
  EXPECT_EQ(score(ConfusionMatrix::from_predictions(7, y, y)).fitness, 1.0);
}

TEST(Fitness, ConstantPredictorOnBalancedClasses) {
  std::vector<int> y, p;
  for (int c = 0; c < 7; ++c) {
    for (int i = 0; i < 5; ++i) {
      y.push_back(c);
      p.push_back(3);
    }
  }
  const auto s = score(ConfusionMatrix::from_predictions(7, y, p));
  EXPECT_DOUBLE_EQ(s.war, 1.0 / 7.0);
  EXPECT_DOUBLE_EQ(s.uar, 1.0 / 7.0);
  EXPECT_DOUBLE_EQ(s.fitness, 1.0 / 7.0);
}

TEST(Fitness, HandCountedTwoClassSplit) {
  const auto s = score(ConfusionMatrix::from_predictions(2, std::vector<int>{0, 0, 0, 1}, std::vector<int>{0, 0, 1, 1}));
  EXPECT_DOUBLE_EQ(s.war, 0.75);
  EXPECT_DOUBLE_EQ(s.uar, 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(s.fitness, 19.0 / 24.0);
}

TEST(Fitness, EmptyEvalSplitRejected) {
  auto cfg = fixtures::small_config();
  Rng rng(1);
  const auto s = Supernet::initialize(cfg, rng);
  auto ds = fixtures::tiny_dataset(cfg, 1, 0.1, 1);
  std::erase_if(ds.samples, [](const auto& x) { return x.split == "eval"; });
  EXPECT_THROW(evaluate_fitness(Genome::parse("3,3,3,3"), s, ds, Domain::Ann), ConfigError);
}

TEST(Fitness, EvaluationLeavesSupernetUntouched) {
  auto cfg = fixtures::small_config();
  Rng rng(2);
  const auto s = Supernet::initialize(cfg, rng);
  const auto before = s.params;
  const auto ds = fixtures::tiny_dataset(cfg, 1, 0.1, 2);
  evaluate_fitness(Genome::parse("3,5,S,3"), s, ds, Domain::Ann);
  evaluate_fitness(Genome::parse("3,5,S,3"), s, ds, Domain::Snn);
  EXPECT_TRUE(s.params == before);
}

TEST(Operators, NoMutationIdenticalParentsGiveParent) {
  Rng rng(3);
  const auto p = Genome::parse("3,5,S,3");
  for (int i = 0; i < 50; ++i) EXPECT_EQ(make_child(p, p, 0.0, rng), p);
}

TEST(Operators, CrossoverTakesEachGeneFromAParent) {
  Rng rng(4);
  const auto a = Genome::parse("3,3,3,3,3,3"), b = Genome::parse("5,5,5,5,5,5");
  std::size_t from_b = 0, total = 0;
  for (int i = 0; i < 500; ++i) {
    const auto c = make_child(a, b, 0.0, rng);
    for (auto ch : c.choices) {
      EXPECT_NE(ch, BlockChoice::Skip);
      from_b += ch == BlockChoice::Conv5;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(from_b) / static_cast<double>(total), 0.5, 0.05);
}

TEST(Operators, CertainMutationChangesEveryGene) {
  Rng rng(5);
  const auto p = Genome::parse("3,5,S,3");
  for (int i = 0; i < 50; ++i) {
    const auto c = make_child(p, p, 1.0, rng);
    for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NE(c.choices[k], p.choices[k]);
  }
}

TEST(Search, ElitismAndBookkeeping) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SearchOptions opt;
    opt.seed = seed;
    const auto r = run_search(4, table_fitness(4, 100 + seed), opt);
    ASSERT_EQ(r.state.history.size(), opt.rounds + 1);
    EXPECT_TRUE(std::is_sorted(r.state.history.begin(), r.state.history.end()));
    EXPECT_EQ(r.state.p_top.size(), opt.n_top);
    EXPECT_TRUE(std::is_sorted(r.state.p_top.begin(), r.state.p_top.end(), better));
    EXPECT_EQ(r.state.log.size(), (opt.rounds + 1) * opt.n_eval);
    EXPECT_EQ(r.best.genome, r.state.best_genomes.back());
    EXPECT_EQ(r.best.fitness(), r.state.history.back());
  }
}

TEST(Search, ZeroRoundsReturnsBestOfInitialPool) {
  SearchOptions opt;
  opt.rounds = 0;
  opt.seed = 7;
  const auto r = run_search(4, table_fitness(4, 7), opt);
  ASSERT_EQ(r.state.log.size(), opt.n_eval);
  double best = 0.0;
  for (const auto& row : r.state.log) best = std::max(best, row.candidate.fitness());
  EXPECT_EQ(r.best.fitness(), best);
  EXPECT_EQ(r.state.history.size(), 1u);
}

TEST(Search, RecoversExhaustiveBestOn81Genomes) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::map<std::string, double> table;
    auto fn = table_fitness(4, 1000 + seed, &table);
    SearchOptions opt;
    opt.seed = seed;
    EXPECT_EQ(run_search(4, fn, opt).best.genome.str(), best_of(table)) << "seed " << seed;
  }
}

TEST(Search, SameSeedSameTrajectory) {
  SearchOptions opt;
  opt.seed = 3;
  const auto a = run_search(6, table_fitness(6, 5), opt);
  const auto b = run_search(6, table_fitness(6, 5), opt);
  ASSERT_EQ(a.state.log.size(), b.state.log.size());
  for (std::size_t i = 0; i < a.state.log.size(); ++i) {
    EXPECT_EQ(a.state.log[i].candidate.genome, b.state.log[i].candidate.genome);
  }
}

TEST(Search, CacheAvoidsRepeatedEvaluations) {
  std::size_t calls = 0;
  auto inner = table_fitness(4, 9);
  SearchOptions opt;
  opt.seed = 9;
  const auto r = run_search(4, [&](const Genome& g) { ++calls; return inner(g); }, opt);
  EXPECT_EQ(calls, r.distinct_evaluations);
  EXPECT_LE(calls, 81u);
}

TEST(Search, AnnAndSnnDomainsSelectTheSameGenomes) {
  auto cfg = fixtures::small_config(4, 16);
  const auto ds = fixtures::tiny_dataset(cfg, 3, 0.2, 21);
  Rng rng(21);
  auto s = Supernet::initialize(cfg, rng);
  train_supernet(s, ds, {3, 7, 5e-3, 21});
  SearchOptions opt;
  opt.rounds = 3;
  opt.n_eval = 4;
  opt.n_top = 4;
  opt.seed = 21;
  const auto ann = run_search(s, ds, Domain::Ann, opt);
  const auto snn = run_search(s, ds, Domain::Snn, opt);
  ASSERT_EQ(ann.state.best_genomes.size(), snn.state.best_genomes.size());
  for (std::size_t r = 0; r < ann.state.best_genomes.size(); ++r) {
    EXPECT_EQ(ann.state.best_genomes[r], snn.state.best_genomes[r]) << "round " << r;
    EXPECT_NEAR(ann.state.history[r], snn.state.history[r], 1e-9) << "round " << r;
  }
}

TEST(RandomSearch, SingleSampleIsReturned) {
  Rng a(11), b(11);
  const auto r = baseline_random_search(4, table_fitness(4, 11), 1, a);
  EXPECT_EQ(r.best.genome, sample_uniform_genome(4, b));
}

TEST(RandomSearch, ReturnsTheArgmax) {
  Rng rng(12);
  const auto r = baseline_random_search(4, table_fitness(4, 12), 30, rng);
  ASSERT_EQ(r.sampled.size(), 30u);
  for (const auto& c : r.sampled) EXPECT_GE(r.best.fitness(), c.fitness());
}

TEST(RandomSearch, FullCoverageEqualsExhaustiveBest) {
  std::map<std::string, double> table;
  auto fn = table_fitness(4, 13, &table);
  Rng rng(13);
  const auto r = baseline_random_search(4, fn, 81, rng);
  std::set<std::string> distinct;
  for (const auto& c : r.sampled) distinct.insert(c.genome.str());
  EXPECT_EQ(distinct.size(), 81u);
  EXPECT_EQ(r.best.genome.str(), best_of(table));
  Rng rng2(13);
  EXPECT_EQ(baseline_random_search(4, fn, 100, rng2).sampled.size(), 81u);  // capped at the space size
}

TEST(RandomSampling, MeanIsArithmeticMean) {
  Rng rng(14);
  auto fn = [](const Genome& g) {
    const double v = static_cast<double>(std::count(g.choices.begin(), g.choices.end(), BlockChoice::Skip)) / 4.0;
    return RecallScores{v, 1.0 - v, 0.5};
  };
  const auto r = baseline_random_sampling(4, 10, fn, rng);
  ASSERT_EQ(r.runs.size(), 10u);
  double w = 0.0, u = 0.0;
  for (const auto& c : r.runs) {
    w += c.scores.war;
    u += c.scores.uar;
  }
  EXPECT_NEAR(r.mean_war, w / 10.0, 1e-15);
  EXPECT_NEAR(r.mean_uar, u / 10.0, 1e-15);
  Rng one(15);
  const auto single = baseline_random_sampling(4, 1, fn, one);
  EXPECT_EQ(single.mean_war, single.runs[0].scores.war);
  EXPECT_EQ(single.mean_uar, single.runs[0].scores.uar);
}

TEST(RandomSampling, AllSkipTrainsAndEvaluates) {
  auto cfg = fixtures::small_config();
  const auto ds = fixtures::tiny_dataset(cfg, 2, 0.1, 16);
  Rng rng(16);
  auto net = Network::initialize(cfg, Genome::parse("S,S,S,S"), NormMode::BatchNorm, rng);
  train_network(net, ds, {2, 4, 5e-3, 16});
  const auto s = score(evaluate_ann(net, ds, "eval"));
  EXPECT_GE(s.fitness, 0.0);
  EXPECT_LE(s.fitness, 1.0);
  const auto snn = ttfs::map_ann_to_snn(fuse_bn(net), split_inputs(ds, "calib"));
  EXPECT_EQ(evaluate_snn(snn, ds, "eval").samples, ds.count("eval"));
}
