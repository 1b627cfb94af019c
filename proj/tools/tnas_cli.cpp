// Command-line front end for the staged search / transfer / fine-tune flow.
//
//   tnas <command> [--out RUN_DIR] [--config PATH] [--preset desk|paper] [--seed N] ...
//
// Exit codes: 0 ok, 2 configuration error, 3 missing or unreadable artifact,
// 4 numerical failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "tnas/tnas.hpp"

namespace {

using namespace tnas;
namespace pl = tnas::pipeline;

struct GlobalOptions {
  std::string out = "run";
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
};

PipelineConfig build_config(const GlobalOptions& g, const pl::RunDir* run, bool& explicit_cfg) {
  explicit_cfg = !g.config_path.empty() || !g.preset.empty() || g.seed.has_value();
  PipelineConfig cfg;
  if (!g.preset.empty()) {
    cfg = preset_config(g.preset);
  } else if (run && std::filesystem::exists(run->config_path())) {
    cfg = parse_config_text(io::read_text(run->config_path()), run->config_path());
  } else {
    cfg = preset_config("desk");
  }
  if (!g.config_path.empty()) {
    if (!std::filesystem::exists(g.config_path)) throw ConfigError("config file not found: " + g.config_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text(g.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(g.config_path + ": " + e.what());
    }
    if (g.preset.empty() && j.contains("preset") && j["preset"].is_string()) {
      cfg = preset_config(j["preset"].get<std::string>());
    }
    cfg = config_from_json(j, cfg);
  }
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

void print_metrics(const std::string& name, const std::string& split, const pl::StageMetrics& m) {
  std::cout << "checkpoint " << name << " (" << m.domain << ", genome " << m.genome << ") on " << split << '\n'
            << "  WAR      " << m.scores.war << '\n'
            << "  UAR      " << m.scores.uar << '\n'
            << "  fitness  " << m.scores.fitness << '\n'
            << "  params   " << m.params << '\n'
            << "  FLOPs    " << m.flops << '\n';
  if (m.synops_per_sample) {
    std::cout << "  SynOps   " << *m.synops_per_sample << " per sample (of " << *m.synapses_per_sample
              << " synapses)\n";
    if (m.calibration_violations) {
      std::cout << "  warning: " << m.calibration_violations << " spikes clamped by window calibration\n";
    }
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"ANN-assisted architecture search for time-to-first-spike networks"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--out", g.out, "Run directory (dataset directory for generate-data)");
  app.add_option("--config", g.config_path, "JSON config overlaid on the preset");
  app.add_option("--preset", g.preset, "Base preset")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", g.seed, "Run seed");

  std::string domain = "ann", genome, from, checkpoint = "snn", split = "eval", kind;
  bool no_baselines = false;

  auto* gen = app.add_subcommand("generate-data", "Write the synthetic dataset (frames + manifest.csv)");
  auto* sup = app.add_subcommand("train-supernet", "Train the weight-sharing supernet");
  auto* srch = app.add_subcommand("search", "Evolutionary search on the trained supernet");
  srch->add_option("--domain", domain, "Fitness domain")->check(CLI::IsMember({"ann", "snn"}));
  auto* ret = app.add_subcommand("retrain", "Train the searched (or given) architecture from scratch");
  ret->add_option("--genome", genome, "Architecture such as 3,5,S,3 (default: best_genome.txt)");
  auto* tr = app.add_subcommand("transfer", "Fuse BN and map the retrained ANN to a calibrated TTFS network");
  auto* ft = app.add_subcommand("finetune-snn", "Fine-tune a spiking checkpoint (quantization-aware if quantized)");
  ft->add_option("--from", from, "Source checkpoint (default snn)");
  auto* qz = app.add_subcommand("quantize", "Quantize weights and spike times of a spiking checkpoint");
  qz->add_option("--from", from, "Source checkpoint (default snn_finetuned if present, else snn)");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint name under checkpoints/");
  ev->add_option("--split", split, "Dataset split")->check(CLI::IsMember({"train", "eval", "calib"}));
  auto* base = app.add_subcommand("baseline", "Run a baseline");
  base->add_option("--kind", kind, "Baseline kind")
      ->required()
      ->check(CLI::IsMember(pl::baseline_kinds()));
  auto* rep = app.add_subcommand("report", "Aggregate logs and results into report/*.csv");
  auto* all = app.add_subcommand("run", "Full pipeline, baselines and report");
  all->add_flag("--no-baselines", no_baselines, "Skip the baselines");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    bool unused = false;
    const auto cfg = build_config(g, nullptr, unused);
    const auto manifest = write_dataset(generate_synthetic(cfg.synthetic_spec()), g.out);
    std::cout << "wrote " << manifest << '\n';
    return 0;
  }

  pl::RunDir run(g.out);
  pl::RunLock lock(run);
  bool explicit_cfg = false;
  auto cfg = build_config(g, &run, explicit_cfg);
  cfg = pl::resolve_config(run, explicit_cfg || !std::filesystem::exists(run.config_path())
                                    ? std::optional<PipelineConfig>(cfg)
                                    : std::nullopt);

  if (rep->parsed()) {
    pl::report_stage(run);
    std::cout << "wrote " << (run.root() / "report").string() << '\n';
    return 0;
  }

  const Dataset ds = pl::load_data(cfg);
  if (ds.clamped_values) std::clog << "[tnas] clamped " << ds.clamped_values << " out-of-range input values\n";

  if (sup->parsed()) {
    pl::train_supernet_stage(cfg, ds, run);
  } else if (srch->parsed()) {
    auto res = pl::search_stage(cfg, ds, run, parse_domain(domain));
    std::cout << res.best.genome.str() << '\n';
  } else if (ret->parsed()) {
    pl::retrain_stage(cfg, ds, run, genome.empty() ? std::nullopt : std::optional<Genome>(Genome::parse(genome)));
  } else if (tr->parsed()) {
    pl::transfer_stage(cfg, ds, run);
  } else if (ft->parsed()) {
    pl::finetune_stage(cfg, ds, run, from.empty() ? "snn" : from);
  } else if (qz->parsed()) {
    pl::quantize_stage(cfg, ds, run, from.empty() ? pl::default_quantize_source(run) : from);
  } else if (ev->parsed()) {
    print_metrics(checkpoint, split, pl::eval_stage(ds, run, checkpoint, split));
  } else if (base->parsed()) {
    std::cout << pl::baseline_stage(cfg, ds, run, kind).dump(2) << '\n';
  } else if (all->parsed()) {
    auto result = pl::run_all(cfg, ds, run, {true, !no_baselines});
    std::cout << result.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const tnas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const tnas::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return 3;
  } catch (const tnas::FormatError& e) {
    std::cerr << "bad artifact: " << e.what() << '\n';
    return 3;
  } catch (const tnas::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
