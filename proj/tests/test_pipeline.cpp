#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "tnas/tnas.hpp"

using namespace tnas;
using namespace tnas::pipeline;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config(std::uint64_t seed = 1) {
  auto c = preset_config("desk");
  c.seed = seed;
  c.macro.stem_out_channels = 4;
  c.macro.height = c.macro.width = 16;
  c.synthetic.height = c.synthetic.width = 16;
  c.synthetic.train_counts = {4, 2, 2, 2, 2, 2, 2};
  c.synthetic.eval_counts = {4, 2, 2, 2, 2, 2, 2};
  c.synthetic.calib_counts = {1, 1, 1, 1, 1, 1, 1};
  c.synthetic.noise = 0.2;
  c.epochs_supernet = 2;
  c.epochs_retrain = 2;
  c.epochs_finetune = 1;
  c.batch_size = 8;
  c.search.rounds = 2;
  c.search.n_eval = 3;
  c.search.n_top = 3;
  c.random_sampling_k = 2;
  c.random_search_n = 3;
  c.validate();
  return c;
}

class RunFixture : public ::testing::Test {
 protected:
  fs::path dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("tnas_pipeline_" + std::string(::testing::UnitTest::GetInstance()
                                                                               ->current_test_info()
                                                                               ->name()) +
                                          "_" + name);
    fs::remove_all(p);
    made_.push_back(p);
    return p;
  }
  void TearDown() override {
    for (const auto& p : made_) fs::remove_all(p);
  }

 private:
  std::vector<fs::path> made_;
};

std::size_t line_count(const std::string& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Every file under `root`, relative path -> contents.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = bytes(e.path());
  }
  return out;
}

}  // namespace

TEST(Config, StageSeedsAreDistinctAndStable) {
  EXPECT_EQ(stage_seed(1, "search"), stage_seed(1, "search"));
  EXPECT_NE(stage_seed(1, "search"), stage_seed(2, "search"));
  EXPECT_NE(stage_seed(1, "search"), stage_seed(1, "supernet-init"));
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny_config(9);
  c.synthetic_seed = 4;
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.synthetic_spec().seed, 4u);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(parse_config_text(R"({"sed": 3})", "x"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"search": {"round": 3}})", "x"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"preset": "laptop"})", "x"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"lr_retrain": -1})", "x"), ConfigError);
  EXPECT_THROW(parse_config_text("{not json", "x"), ConfigError);
  EXPECT_EQ(parse_config_text(R"({"preset": "paper"})", "x").epochs_retrain, 600u);
}

TEST(Config, PaperPresetCarriesPublishedBudgets) {
  const auto p = preset_config("paper");
  EXPECT_EQ(p.lr_supernet, 5e-3);
  EXPECT_EQ(p.lr_retrain, 5e-4);
  EXPECT_EQ(p.lr_finetune, 5e-5);
  EXPECT_EQ(p.batch_size, 96u);
  EXPECT_EQ(p.search.rounds, 18u);
  EXPECT_EQ(p.search.n_eval, 12u);
  EXPECT_EQ(p.search.n_top, 12u);
  EXPECT_EQ(p.macro.stem_out_channels, 32u);
}

TEST_F(RunFixture, DatasetShapeMustMatchMacro) {
  auto c = tiny_config();
  c.synthetic.height = 8;
  EXPECT_THROW(load_data(c), ConfigError);
}

TEST_F(RunFixture, LockIsExclusive) {
  RunDir run(dir("a"));
  {
    RunLock lock(run);
    EXPECT_THROW(RunLock{run}, ConfigError);
  }
  EXPECT_NO_THROW(RunLock{run});
}

TEST_F(RunFixture, ZeroEpochSupernetIsTheInitialization) {
  auto c = tiny_config();
  c.epochs_supernet = 0;
  RunDir run(dir("a"));
  const auto ds = load_data(c);
  train_supernet_stage(c, ds, run);
  Rng init(stage_seed(c.seed, "supernet-init"));
  const auto expect = Supernet::initialize(c.macro, init);
  EXPECT_TRUE(ckpt::load_supernet(run.checkpoint("supernet")).params == expect.params);
  EXPECT_EQ(line_count(run.log("supernet_loss.csv")), 1u);
}

TEST_F(RunFixture, SupernetLogAndCheckpointBytes) {
  const auto c = tiny_config();
  const auto ds = load_data(c);
  RunDir a(dir("a")), b(dir("b"));
  train_supernet_stage(c, ds, a);
  train_supernet_stage(c, ds, b);
  const std::size_t steps = c.epochs_supernet * ((ds.count("train") + c.batch_size - 1) / c.batch_size);
  EXPECT_EQ(line_count(a.log("supernet_loss.csv")), steps + 1);
  const auto ta = tree(a.checkpoint("supernet")), tb = tree(b.checkpoint("supernet"));
  EXPECT_GT(ta.size(), 2u);
  EXPECT_TRUE(ta == tb);
  EXPECT_EQ(bytes(a.log("supernet_loss.csv")), bytes(b.log("supernet_loss.csv")));
}

TEST_F(RunFixture, CheckpointsRoundTrip) {
  const auto c = tiny_config();
  const auto ds = load_data(c);
  RunDir run(dir("a"));
  const auto net = train_subnet(c, ds, Genome::parse("3,5,S,3"), NormMode::BatchNorm);
  ckpt::save(net, run.checkpoint("ann"));
  const auto back = ckpt::load_network(run.checkpoint("ann"));
  EXPECT_TRUE(back.params == net.params);
  EXPECT_EQ(back.genome, net.genome);
  EXPECT_EQ(back.config, net.config);
  const auto snn = ttfs::quantize(to_snn(c, ds, net), 6, 8);
  ckpt::save(snn, run.checkpoint("q"));
  const auto sb = ckpt::load_snn(run.checkpoint("q"));
  ASSERT_EQ(sb.layers.size(), snn.layers.size());
  EXPECT_EQ(sb.quant, snn.quant);
  for (std::size_t i = 0; i < sb.layers.size(); ++i) {
    EXPECT_EQ(sb.layers[i].t_min, snn.layers[i].t_min);
    EXPECT_EQ(sb.layers[i].t_max, snn.layers[i].t_max);
    EXPECT_EQ(sb.layers[i].readout_offset, snn.layers[i].readout_offset);
    EXPECT_TRUE(sb.layers[i].weights == snn.layers[i].weights);
    EXPECT_TRUE(sb.layers[i].thresholds == snn.layers[i].thresholds);
  }
  EXPECT_THROW(ckpt::load_network(run.checkpoint("q")), FormatError);
  EXPECT_THROW(ckpt::load_snn(run.checkpoint("missing")), MissingArtifact);
}

TEST_F(RunFixture, SearchOutputsAndDomainAgreement) {
  const auto c = tiny_config();
  const auto ds = load_data(c);
  RunDir run(dir("a"));
  EXPECT_THROW(search_stage(c, ds, run, Domain::Ann), MissingArtifact);
  train_supernet_stage(c, ds, run);
  const auto snn = search_stage(c, ds, run, Domain::Snn);
  const auto ann = search_stage(c, ds, run, Domain::Ann);
  EXPECT_EQ(ann.best.genome, snn.best.genome);
  EXPECT_EQ(ann.state.best_genomes, snn.state.best_genomes);
  EXPECT_EQ(line_count(run.log("search_ann.csv")), (c.search.rounds + 1) * c.search.n_eval + 1);
  EXPECT_EQ(line_count(run.log("search_history_ann.csv")), c.search.rounds + 2);
  EXPECT_EQ(read_best_genome(run), ann.best.genome);
  EXPECT_EQ(run.result()["search"]["ann"]["best_genome"], ann.best.genome.str());
}

TEST_F(RunFixture, TransferMatchesRetrainedAnn) {
  const auto c = tiny_config();
  const auto ds = load_data(c);
  RunDir run(dir("a"));
  EXPECT_THROW(transfer_stage(c, ds, run), MissingArtifact);
  EXPECT_THROW(quantize_stage(c, ds, run, "snn"), MissingArtifact);  // quantize before transfer
  retrain_stage(c, ds, run, Genome::parse("3,S,5,3"));
  transfer_stage(c, ds, run);
  const auto r = run.result()["stages"];
  EXPECT_NEAR(r["retrain"]["war"].get<double>(), r["transfer"]["war"].get<double>(), 1e-9);
  EXPECT_NEAR(r["retrain"]["uar"].get<double>(), r["transfer"]["uar"].get<double>(), 1e-9);
  const auto ann_eval = eval_stage(ds, run, "ann", "eval");
  const auto snn_eval = eval_stage(ds, run, "snn", "eval");
  EXPECT_TRUE(*ann_eval.confusion == *snn_eval.confusion);
  EXPECT_TRUE(fs::exists(run.log("confusion_snn_eval.csv")));
  EXPECT_EQ(snn_eval.domain, "snn");
  EXPECT_GT(snn_eval.synops_per_sample.value(), 0.0);
}

TEST_F(RunFixture, FinetuneQuantizeFinetune) {
  const auto c = tiny_config();
  const auto ds = load_data(c);
  RunDir run(dir("a"));
  retrain_stage(c, ds, run, Genome::parse("3,3,3,3"));
  transfer_stage(c, ds, run);
  finetune_stage(c, ds, run, "snn");
  EXPECT_EQ(default_quantize_source(run), "snn_finetuned");
  const auto q = quantize_stage(c, ds, run, "snn_finetuned");
  ASSERT_TRUE(q.quant.has_value());
  EXPECT_THROW(quantize_stage(c, ds, run, "snn_quant"), ConfigError);
  const auto qf = finetune_stage(c, ds, run, "snn_quant");
  EXPECT_TRUE(qf.quant.has_value());
  EXPECT_NO_THROW(qf.check_windows());
  const auto stages = run.result()["stages"];
  for (const char* s : {"retrain", "transfer", "snn_finetuned", "snn_quant", "snn_quant_finetuned"}) {
    EXPECT_TRUE(stages.contains(s)) << s;
  }
}

TEST_F(RunFixture, MemorizedNoiseFreeSetIsPerfect) {
  auto c = tiny_config();
  c.synthetic.noise = 0.0;
  c.epochs_retrain = 40;
  c.lr_retrain = 5e-3;
  const auto ds = load_data(c);
  RunDir run(dir("a"));
  retrain_stage(c, ds, run, Genome::parse("3,3,3,3"));
  const auto m = eval_stage(ds, run, "ann", "eval");
  EXPECT_EQ(m.scores.war, 1.0);
  EXPECT_EQ(m.scores.uar, 1.0);
}

TEST_F(RunFixture, FullRunWithBaselinesAndReport) {
  const auto c = tiny_config(3);
  const auto ds = load_data(c);
  RunDir run(dir("a"));
  const auto result = run_all(c, ds, run);
  for (const auto& k : baseline_kinds()) EXPECT_TRUE(result["baselines"].contains(k)) << k;
  EXPECT_EQ(result["baselines"]["random-sampling"]["runs"].size(), c.random_sampling_k);
  EXPECT_EQ(result["baselines"]["random-search"]["sampled"].get<std::size_t>(), c.random_search_n);
  for (const char* f : {"fitness_curves.csv", "metrics.csv", "random_sampling.csv"}) {
    EXPECT_TRUE(fs::exists(run.root() / "report" / f)) << f;
  }
  EXPECT_EQ(line_count((run.root() / "report" / "fitness_curves.csv").string()), 2 * (c.search.rounds + 1) + 1);
  EXPECT_THROW(baseline_stage(c, ds, run, "grid"), ConfigError);
}
