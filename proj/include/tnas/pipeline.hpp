#pragma once

/// @file pipeline.hpp
/// The staged flow over a run directory:
///
///   train-supernet -> search -> retrain -> transfer -> finetune-snn
///                                       -> quantize -> finetune-snn
///
/// plus evaluation, baselines and reporting. Layout of a run directory:
///
///   config.json            resolved configuration
///   best_genome.txt        written by search, read by retrain
///   checkpoints/<name>/    supernet, ann, snn, snn_finetuned, snn_quant, ...
///   logs/*.csv             losses, search logs, confusion matrices
///   report/*.csv           written by report
///   result.json            metrics of every stage run so far
///
/// Nothing written depends on wall-clock time, so a rerun with the same
/// config reproduces every file byte for byte.

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tnas/checkpoint.hpp"
#include "tnas/config.hpp"
#include "tnas/data.hpp"
#include "tnas/metrics.hpp"
#include "tnas/search.hpp"
#include "tnas/supernet.hpp"
#include "tnas/train.hpp"
#include "tnas/ttfs.hpp"

namespace tnas::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Independent stream per stage, derived from the run seed.
inline std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (char c : stage) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull + h;  // splitmix64 finalizer
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// --------------------------------------------------------------- run dir

class RunDir {
 public:
  explicit RunDir(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_ / "checkpoints");
    fs::create_directories(root_ / "logs");
  }

  const fs::path& root() const { return root_; }
  std::string checkpoint(const std::string& name) const { return (root_ / "checkpoints" / name).string(); }
  bool has_checkpoint(const std::string& name) const {
    return fs::exists(root_ / "checkpoints" / name / "manifest.json");
  }
  std::string log(const std::string& name) const { return (root_ / "logs" / name).string(); }
  std::string config_path() const { return (root_ / "config.json").string(); }
  std::string result_path() const { return (root_ / "result.json").string(); }
  std::string genome_path() const { return (root_ / "best_genome.txt").string(); }

  json result() const {
    if (!fs::exists(result_path())) return json::object();
    try {
      return json::parse(io::read_text(result_path()));
    } catch (const json::exception& e) {
      throw FormatError(result_path() + ": " + e.what());
    }
  }

  /// Stores `value` at result[section][key].
  void record(const std::string& section, const std::string& key, json value) const {
    json r = result();
    r[section][key] = std::move(value);
    io::write_text(result_path(), r.dump(2) + "\n");
  }

 private:
  fs::path root_;
};

/// Advisory lock: one command per run directory at a time.
class RunLock {
 public:
  explicit RunLock(const RunDir& run) : path_(run.root() / ".lock") {
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f) {
      throw ConfigError("run directory " + run.root().string() + " is locked by another command (remove " +
                        path_.string() + " if stale)");
    }
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

/// Resolves the run's config: an explicit config wins and is persisted;
/// otherwise an existing config.json is reused; otherwise the preset.
inline PipelineConfig resolve_config(const RunDir& run, const std::optional<PipelineConfig>& explicit_cfg) {
  if (explicit_cfg) {
    explicit_cfg->validate();
    io::write_text(run.config_path(), to_json(*explicit_cfg).dump(2) + "\n");
    return *explicit_cfg;
  }
  if (fs::exists(run.config_path())) return parse_config_text(io::read_text(run.config_path()), run.config_path());
  auto cfg = preset_config("desk");
  io::write_text(run.config_path(), to_json(cfg).dump(2) + "\n");
  return cfg;
}

inline Dataset load_data(const PipelineConfig& cfg) {
  Dataset ds;
  if (cfg.manifest.empty()) {
    ds = generate_synthetic(cfg.synthetic_spec());
  } else {
    LoadOptions opt;
    opt.num_classes = cfg.macro.num_classes;
    opt.allow_calib_in_train = cfg.allow_calib_in_train;
    ds = load_dataset(cfg.manifest, opt);
  }
  if (ds.num_classes != cfg.macro.num_classes || ds.channels != cfg.macro.input_channels ||
      ds.height != cfg.macro.height || ds.width != cfg.macro.width) {
    throw ConfigError("dataset shape (" + std::to_string(ds.num_classes) + " classes, " + std::to_string(ds.channels) +
                      "x" + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                      ") does not match the macro config");
  }
  return ds;
}

// ----------------------------------------------------------------- logging

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return s.str();
}

class CsvLog {
 public:
  explicit CsvLog(std::string header) { out_ << header << '\n'; }
  template <typename... Ts>
  void row(const Ts&... cols) {
    std::size_t i = 0;
    ((out_ << (i++ ? "," : "") << cell(cols)), ...);
    out_ << '\n';
  }
  void save(const std::string& path) const { io::write_text(path, out_.str()); }

 private:
  static std::string cell(double v) { return fmt(v); }
  static std::string cell(const std::string& v) { return v; }
  static std::string cell(const char* v) { return v; }
  template <typename T>
  static std::string cell(const T& v) {
    return std::to_string(v);
  }
  std::ostringstream out_;
};

inline LossSink loss_sink(CsvLog& log) {
  return [&log](std::size_t epoch, std::size_t step, double loss) { log.row(epoch, step, loss); };
}

inline void note(const std::string& msg) { std::clog << "[tnas] " << msg << '\n'; }

}  // namespace detail

// ----------------------------------------------------------------- metrics

struct StageMetrics {
  std::string domain;  // ann | snn
  std::string genome;
  RecallScores scores;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::optional<double> synops_per_sample;
  std::optional<double> synapses_per_sample;
  std::size_t calibration_violations = 0;
  std::optional<ConfusionMatrix> confusion;
};

inline json to_json(const StageMetrics& m) {
  json j{{"domain", m.domain}, {"genome", m.genome},  {"war", m.scores.war},  {"uar", m.scores.uar},
         {"fitness", m.scores.fitness}, {"params", m.params}, {"flops", m.flops}};
  if (m.synops_per_sample) {
    j["synops_per_sample"] = *m.synops_per_sample;
    j["synapses_per_sample"] = *m.synapses_per_sample;
    j["calibration_violations"] = m.calibration_violations;
  }
  return j;
}

inline StageMetrics measure(const Network& net, const Dataset& ds, const std::string& split) {
  auto cm = evaluate_ann(net, ds, split);
  return {"ann", net.genome.str(), score(cm), param_count(net.genome, net.config), flops(net.genome, net.config),
          std::nullopt, std::nullopt, 0, cm};
}

inline StageMetrics measure(const ttfs::TtfsNetwork& snn, const Dataset& ds, const std::string& split) {
  auto ev = evaluate_snn(snn, ds, split);
  const double n = static_cast<double>(ev.samples);
  return {"snn",
          snn.genome.str(),
          score(ev.confusion),
          param_count(snn.genome, snn.config),
          flops(snn.genome, snn.config),
          static_cast<double>(ev.synops) / n,
          static_cast<double>(ev.synapses) / n,
          ev.calibration_violations,
          ev.confusion};
}

inline void write_confusion(const ConfusionMatrix& cm, const std::string& path) {
  std::string header = "true_class";
  for (std::size_t j = 0; j < cm.classes(); ++j) header += ",pred_" + std::to_string(j);
  detail::CsvLog log(header);
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    std::string row = std::to_string(i);
    for (std::size_t j = 0; j < cm.classes(); ++j) row += "," + std::to_string(cm.at(i, j));
    log.row(row);
  }
  log.save(path);
}

inline void record_stage(const RunDir& run, const std::string& stage, const StageMetrics& m) {
  run.record("stages", stage, to_json(m));
  if (m.confusion) write_confusion(*m.confusion, run.log("confusion_" + stage + ".csv"));
}

// ------------------------------------------------------------------ stages

inline Supernet train_supernet_stage(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run) {
  Rng init(stage_seed(cfg.seed, "supernet-init"));
  auto supernet = Supernet::initialize(cfg.macro, init);
  detail::CsvLog log("epoch,step,loss");
  train_supernet(supernet, ds,
                 {cfg.epochs_supernet, cfg.batch_size, cfg.lr_supernet, stage_seed(cfg.seed, "supernet-order")},
                 detail::loss_sink(log));
  log.save(run.log("supernet_loss.csv"));
  ckpt::save(supernet, run.checkpoint("supernet"));
  detail::note("supernet trained for " + std::to_string(cfg.epochs_supernet) + " epochs");
  return supernet;
}

inline Supernet require_supernet(const RunDir& run) {
  if (!run.has_checkpoint("supernet")) throw MissingArtifact("no supernet checkpoint; run train-supernet first");
  return ckpt::load_supernet(run.checkpoint("supernet"));
}

inline SearchOptions search_options(const PipelineConfig& cfg) {
  return {cfg.search.rounds, cfg.search.n_eval, cfg.search.n_top, cfg.search.p_mut, stage_seed(cfg.seed, "search")};
}

inline SearchResult search_stage(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run, Domain domain) {
  const auto supernet = require_supernet(run);
  auto res = run_search(supernet, ds, domain, search_options(cfg), cfg.calibration());
  const auto d = domain_name(domain);
  detail::CsvLog log("round,genome,war,uar,fitness,domain");
  for (const auto& r : res.state.log) {
    log.row(r.round, r.candidate.genome.str(), r.candidate.scores.war, r.candidate.scores.uar,
            r.candidate.scores.fitness, d);
  }
  log.save(run.log("search_" + d + ".csv"));
  detail::CsvLog hist("round,best_fitness,best_genome");
  json history = json::array();
  for (std::size_t i = 0; i < res.state.history.size(); ++i) {
    hist.row(i, res.state.history[i], res.state.best_genomes[i].str());
    history.push_back({{"round", i}, {"best_fitness", res.state.history[i]},
                       {"best_genome", res.state.best_genomes[i].str()}});
  }
  hist.save(run.log("search_history_" + d + ".csv"));
  io::write_text(run.genome_path(), res.best.genome.str() + "\n");
  run.record("search", d,
             {{"best_genome", res.best.genome.str()}, {"best_fitness", res.best.fitness()},
              {"best_war", res.best.scores.war}, {"best_uar", res.best.scores.uar},
              {"distinct_evaluations", res.distinct_evaluations}, {"history", history}});
  detail::note(d + " search: best " + res.best.genome.str() + " fitness " + detail::fmt(res.best.fitness()));
  return res;
}

inline Genome read_best_genome(const RunDir& run) {
  if (!fs::exists(run.genome_path())) throw MissingArtifact("no best_genome.txt; run search first");
  return Genome::parse(io::read_text(run.genome_path()));
}

/// Trains one architecture from scratch. The initialization and batch order
/// depend only on the run seed, so different genomes share them.
inline Network train_subnet(const PipelineConfig& cfg, const Dataset& ds, const Genome& genome, NormMode mode,
                            const LossSink& sink = {}) {
  cfg.macro.check_genome(genome);
  Rng init(stage_seed(cfg.seed, "subnet-init"));
  auto net = Network::initialize(cfg.macro, genome, mode, init);
  train_network(net, ds, {cfg.epochs_retrain, cfg.batch_size, cfg.lr_retrain, stage_seed(cfg.seed, "subnet-order")},
                sink);
  return net;
}

inline Network retrain_stage(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run,
                             std::optional<Genome> genome = std::nullopt) {
  const Genome g = genome ? *genome : read_best_genome(run);
  detail::CsvLog log("epoch,step,loss");
  auto net = train_subnet(cfg, ds, g, NormMode::BatchNorm, detail::loss_sink(log));
  log.save(run.log("retrain_loss.csv"));
  ckpt::save(net, run.checkpoint("ann"));
  record_stage(run, "retrain", measure(net, ds, "eval"));
  detail::note("retrained " + g.str());
  return net;
}

/// Fused, calibrated spiking network for a trained ANN.
inline ttfs::TtfsNetwork to_snn(const PipelineConfig& cfg, const Dataset& ds, const Network& ann) {
  Network fused = ann;
  if (!ann.is_fused()) {
    detail::note("fusing batch normalization into convolution weights before transfer");
    fused = fuse_bn(ann);
  }
  return ttfs::map_ann_to_snn(fused, split_inputs(ds, "calib"), cfg.calibration());
}

inline ttfs::TtfsNetwork transfer_stage(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run) {
  if (!run.has_checkpoint("ann")) throw MissingArtifact("no ann checkpoint; run retrain first");
  auto snn = to_snn(cfg, ds, ckpt::load_network(run.checkpoint("ann")));
  ckpt::save(snn, run.checkpoint("snn"));
  record_stage(run, "transfer", measure(snn, ds, "eval"));
  return snn;
}

inline ttfs::TtfsNetwork require_snn(const RunDir& run, const std::string& name) {
  if (!run.has_checkpoint(name)) {
    throw MissingArtifact("no spiking checkpoint '" + name + "'; run transfer (and quantize) first");
  }
  return ckpt::load_snn(run.checkpoint(name));
}

inline ttfs::TtfsNetwork finetune_stage(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run,
                                        const std::string& from = "snn") {
  const auto src = require_snn(run, from);
  const std::string to = from + "_finetuned";
  detail::CsvLog log("epoch,step,loss");
  auto out = finetune_snn(src, ds,
                          {cfg.epochs_finetune, cfg.batch_size, cfg.lr_finetune, stage_seed(cfg.seed, "finetune-order")},
                          cfg.calibration(), detail::loss_sink(log));
  log.save(run.log("finetune_" + from + "_loss.csv"));
  ckpt::save(out, run.checkpoint(to));
  record_stage(run, to, measure(out, ds, "eval"));
  return out;
}

/// Default quantization source: the fine-tuned network when present.
inline std::string default_quantize_source(const RunDir& run) {
  return run.has_checkpoint("snn_finetuned") ? "snn_finetuned" : "snn";
}

inline ttfs::TtfsNetwork quantize_stage(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run,
                                        const std::string& from) {
  const auto src = require_snn(run, from);
  if (src.quant) throw ConfigError("checkpoint '" + from + "' is already quantized");
  auto q = ttfs::quantize(src, cfg.quant.weight_bits, cfg.quant.time_steps);
  ckpt::save(q, run.checkpoint("snn_quant"));
  record_stage(run, "snn_quant", measure(q, ds, "eval"));
  return q;
}

/// Evaluates any checkpoint of the run on a split.
inline StageMetrics eval_stage(const Dataset& ds, const RunDir& run, const std::string& name,
                               const std::string& split) {
  if (!run.has_checkpoint(name)) throw MissingArtifact("no checkpoint '" + name + "' in " + run.root().string());
  const auto kind = ckpt::peek_kind(run.checkpoint(name));
  StageMetrics m;
  if (kind == "snn") {
    m = measure(ckpt::load_snn(run.checkpoint(name)), ds, split);
  } else if (kind == "ann") {
    m = measure(ckpt::load_network(run.checkpoint(name)), ds, split);
  } else {
    throw ConfigError("checkpoint '" + name + "' is a " + kind + "; evaluate an ann or snn checkpoint");
  }
  write_confusion(*m.confusion, run.log("confusion_" + name + "_" + split + ".csv"));
  return m;
}

// --------------------------------------------------------------- baselines

/// Retrain from scratch, transfer, evaluate the spiking network.
inline StageMetrics transferred_score(const PipelineConfig& cfg, const Dataset& ds, const Genome& g) {
  return measure(to_snn(cfg, ds, train_subnet(cfg, ds, g, NormMode::BatchNorm)), ds, "eval");
}

inline const std::vector<std::string>& baseline_kinds() {
  static const std::vector<std::string> kinds{"fixed-3x3", "fixed-5x5", "direct-snn", "random-sampling",
                                              "random-search"};
  return kinds;
}

inline json baseline_stage(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run, const std::string& kind) {
  const std::size_t blocks = cfg.macro.searchable_blocks();
  json out;
  if (kind == "fixed-3x3" || kind == "fixed-5x5") {
    const auto g = Genome::uniform(blocks, kind == "fixed-3x3" ? BlockChoice::Conv3 : BlockChoice::Conv5);
    out = to_json(transferred_score(cfg, ds, g));
  } else if (kind == "direct-snn") {
    // BN-free network trained from scratch, i.e. the spiking network's own parameterization
    const auto g = read_best_genome(run);
    auto net = train_subnet(cfg, ds, g, NormMode::Bias);
    auto snn = ttfs::map_ann_to_snn(net, split_inputs(ds, "calib"), cfg.calibration());
    ckpt::save(snn, run.checkpoint("direct_snn"));
    out = to_json(measure(snn, ds, "eval"));
  } else if (kind == "random-sampling") {
    Rng rng(stage_seed(cfg.seed, "random-sampling"));
    detail::CsvLog log("genome,war,uar,fitness");
    auto res = baseline_random_sampling(
        blocks, cfg.random_sampling_k, [&](const Genome& g) { return transferred_score(cfg, ds, g).scores; }, rng);
    json runs = json::array();
    for (const auto& c : res.runs) {
      log.row(c.genome.str(), c.scores.war, c.scores.uar, c.scores.fitness);
      runs.push_back({{"genome", c.genome.str()}, {"war", c.scores.war}, {"uar", c.scores.uar}});
    }
    log.save(run.log("baseline_random_sampling.csv"));
    out = {{"mean_war", res.mean_war}, {"mean_uar", res.mean_uar}, {"runs", runs}};
  } else if (kind == "random-search") {
    const auto supernet = require_supernet(run);
    Rng rng(stage_seed(cfg.seed, "random-search"));
    auto res = baseline_random_search(
        blocks, [&](const Genome& g) { return evaluate_fitness(g, supernet, ds, Domain::Ann, cfg.calibration()); },
        cfg.random_search_n, rng);
    detail::CsvLog log("genome,war,uar,fitness");
    for (const auto& c : res.sampled) log.row(c.genome.str(), c.scores.war, c.scores.uar, c.scores.fitness);
    log.save(run.log("baseline_random_search.csv"));
    out = {{"best_genome", res.best.genome.str()}, {"best_fitness", res.best.fitness()},
           {"sampled", res.sampled.size()}};
  } else {
    throw ConfigError("unknown baseline '" + kind + "' (expected fixed-3x3, fixed-5x5, direct-snn, random-sampling "
                      "or random-search)");
  }
  run.record("baselines", kind, out);
  detail::note("baseline " + kind + " done");
  return out;
}

// ------------------------------------------------------------------ report

/// Aggregates fitness curves and final metrics into report/*.csv.
inline void report_stage(const RunDir& run) {
  const auto result = run.result();
  if (result.empty()) throw MissingArtifact("no result.json in " + run.root().string() + "; run a stage first");
  fs::create_directories(run.root() / "report");
  detail::CsvLog curves("domain,round,best_fitness,best_genome");
  if (result.contains("search")) {
    for (const auto& [domain, s] : result["search"].items()) {
      for (const auto& h : s["history"]) {
        curves.row(domain, h["round"].get<std::size_t>(), h["best_fitness"].get<double>(),
                   h["best_genome"].get<std::string>());
      }
    }
  }
  curves.save((run.root() / "report" / "fitness_curves.csv").string());
  detail::CsvLog metrics("stage,domain,genome,war,uar,fitness,params,flops,synops_per_sample");
  auto add = [&](const std::string& name, const json& m) {
    if (!m.contains("war") || !m.contains("genome")) return;
    metrics.row(name, m["domain"].get<std::string>(), m["genome"].get<std::string>(), m["war"].get<double>(),
                m["uar"].get<double>(), m["fitness"].get<double>(), m["params"].get<std::uint64_t>(),
                m["flops"].get<std::uint64_t>(),
                m.contains("synops_per_sample") ? detail::fmt(m["synops_per_sample"].get<double>()) : std::string());
  };
  if (result.contains("stages")) {
    for (const auto& [name, m] : result["stages"].items()) add(name, m);
  }
  if (result.contains("baselines")) {
    for (const auto& [name, m] : result["baselines"].items()) add("baseline:" + name, m);
  }
  metrics.save((run.root() / "report" / "metrics.csv").string());
  detail::CsvLog base("baseline,war,uar");
  if (result.contains("baselines") && result["baselines"].contains("random-sampling")) {
    const auto& r = result["baselines"]["random-sampling"];
    base.row(std::string("random-sampling(mean)"), r["mean_war"].get<double>(), r["mean_uar"].get<double>());
  }
  base.save((run.root() / "report" / "random_sampling.csv").string());
}

// --------------------------------------------------------------------- run

struct RunOptions {
  bool search_both_domains = true;
  bool baselines = true;
};

/// The full flow in one go. Returns the final result.json document.
inline json run_all(const PipelineConfig& cfg, const Dataset& ds, const RunDir& run, const RunOptions& opt = {}) {
  train_supernet_stage(cfg, ds, run);
  if (opt.search_both_domains) search_stage(cfg, ds, run, Domain::Snn);
  search_stage(cfg, ds, run, Domain::Ann);  // last writer of best_genome.txt
  retrain_stage(cfg, ds, run);
  transfer_stage(cfg, ds, run);
  finetune_stage(cfg, ds, run, "snn");
  quantize_stage(cfg, ds, run, "snn_finetuned");
  finetune_stage(cfg, ds, run, "snn_quant");
  if (opt.baselines) {
    for (const auto& kind : baseline_kinds()) baseline_stage(cfg, ds, run, kind);
  }
  report_stage(run);
  return run.result();
}

}  // namespace tnas::pipeline
