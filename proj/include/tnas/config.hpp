#pragma once

/// @file config.hpp
/// Pipeline configuration, presets and JSON (de)serialization.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tnas/checkpoint.hpp"
#include "tnas/data.hpp"
#include "tnas/error.hpp"
#include "tnas/network.hpp"

namespace tnas {

struct SearchConfig {
  std::size_t rounds = 18;
  std::size_t n_eval = 12;
  std::size_t n_top = 12;
  double p_mut = 0.1;
};

struct QuantConfig {
  int weight_bits = 8;
  int time_steps = 16;
};

struct PipelineConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;

  // data: a manifest path, or the synthetic generator when empty
  std::string manifest;
  bool allow_calib_in_train = false;
  SyntheticSpec synthetic;
  std::optional<std::uint64_t> synthetic_seed;  // defaults to `seed`

  MacroConfig macro;
  double lr_supernet = 5e-3;
  double lr_retrain = 5e-4;
  double lr_finetune = 5e-5;
  std::size_t epochs_supernet = 600;
  std::size_t epochs_retrain = 600;
  std::size_t epochs_finetune = 100;
  std::size_t batch_size = 96;
  SearchConfig search;
  double tau_c = 1.0;
  double margin = 1.2;
  double window_floor = 1.0;
  QuantConfig quant;
  std::size_t random_sampling_k = 10;
  std::size_t random_search_n = 100;

  void validate() const {
    macro.validate();
    auto positive = [](double v, const char* what) {
      if (!(v > 0.0)) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(lr_supernet, "lr_supernet");
    positive(lr_retrain, "lr_retrain");
    positive(lr_finetune, "lr_finetune");
    positive(tau_c, "tau_c");
    positive(margin, "margin");
    positive(window_floor, "window_floor");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (search.n_eval == 0 || search.n_top == 0) throw ConfigError("search.n_eval and search.n_top must be positive");
    if (search.p_mut < 0.0 || search.p_mut > 1.0) throw ConfigError("search.p_mut must lie in [0,1]");
    if (quant.weight_bits < 2 || quant.weight_bits > 30) throw ConfigError("quantization.weight_bits must be in [2,30]");
    if (quant.time_steps < 2) throw ConfigError("quantization.time_steps must be at least 2");
    if (random_sampling_k == 0 || random_search_n == 0) throw ConfigError("baseline sample counts must be positive");
    if (manifest.empty() && synthetic.num_classes != macro.num_classes) {
      throw ConfigError("synthetic.num_classes must equal macro.num_classes");
    }
  }

  ttfs::CalibrationOptions calibration() const { return {tau_c, margin, window_floor, 0.0, tau_c}; }

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s = synthetic;
    s.seed = synthetic_seed.value_or(seed);
    return s;
  }
};

/// Named presets. "desk" fits a single CPU core; "paper" carries the
/// published budgets.
inline PipelineConfig preset_config(std::string_view name) {
  PipelineConfig c;
  if (name == "paper") {
    c.preset = "paper";
    c.macro.stem_out_channels = 32;
    return c;
  }
  if (name != "desk") throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk or paper)");
  c.preset = "desk";
  c.macro.stem_out_channels = 8;
  c.epochs_supernet = 30;
  c.epochs_retrain = 30;
  c.epochs_finetune = 10;
  c.batch_size = 16;
  c.lr_supernet = 5e-3;
  c.lr_retrain = 5e-3;
  c.lr_finetune = 5e-4;
  c.synthetic.train_counts = {32, 16, 16, 16, 16, 16, 16};
  c.synthetic.eval_counts = {80, 40, 40, 40, 40, 40, 40};
  c.synthetic.calib_counts = {4, 2, 2, 2, 2, 2, 2};
  c.synthetic.noise = 0.3;
  return c;
}

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + where + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json syn{{"num_classes", c.synthetic.num_classes}, {"train_counts", c.synthetic.train_counts},
                     {"eval_counts", c.synthetic.eval_counts}, {"calib_counts", c.synthetic.calib_counts},
                     {"height", c.synthetic.height},           {"width", c.synthetic.width},
                     {"noise", c.synthetic.noise},             {"amplitude", c.synthetic.amplitude}};
  syn["seed"] = c.synthetic_seed ? nlohmann::json(*c.synthetic_seed) : nlohmann::json(nullptr);
  return nlohmann::json{
      {"preset", c.preset},
      {"seed", c.seed},
      {"data", {{"manifest", c.manifest}, {"allow_calib_in_train", c.allow_calib_in_train}, {"synthetic", syn}}},
      {"macro", ckpt::config_to_json(c.macro)},
      {"lr_supernet", c.lr_supernet},
      {"lr_retrain", c.lr_retrain},
      {"lr_finetune", c.lr_finetune},
      {"epochs_supernet", c.epochs_supernet},
      {"epochs_retrain", c.epochs_retrain},
      {"epochs_finetune", c.epochs_finetune},
      {"batch_size", c.batch_size},
      {"search", {{"rounds", c.search.rounds}, {"n_eval", c.search.n_eval}, {"n_top", c.search.n_top},
                  {"p_mut", c.search.p_mut}}},
      {"tau_c", c.tau_c},
      {"margin", c.margin},
      {"window_floor", c.window_floor},
      {"quantization", {{"weight_bits", c.quant.weight_bits}, {"time_steps", c.quant.time_steps}}},
      {"baselines", {{"random_sampling_k", c.random_sampling_k}, {"random_search_n", c.random_search_n}}}};
}

/// Overlays a JSON document on `base`. Unknown keys are rejected.
inline PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig c) {
  using detail::read;
  detail::reject_unknown(j, {"preset", "seed", "data", "macro", "lr_supernet", "lr_retrain", "lr_finetune",
                             "epochs_supernet", "epochs_retrain", "epochs_finetune", "batch_size", "search", "tau_c",
                             "margin", "window_floor", "quantization", "baselines"},
                         "");
  read(j, "seed", c.seed, "");
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown(d, {"manifest", "allow_calib_in_train", "synthetic"}, "data");
    read(d, "manifest", c.manifest, "data.");
    read(d, "allow_calib_in_train", c.allow_calib_in_train, "data.");
    if (d.contains("synthetic")) {
      const auto& s = d["synthetic"];
      detail::reject_unknown(s, {"num_classes", "train_counts", "eval_counts", "calib_counts", "height", "width",
                                 "noise", "amplitude", "seed"},
                             "data.synthetic");
      read(s, "num_classes", c.synthetic.num_classes, "data.synthetic.");
      read(s, "train_counts", c.synthetic.train_counts, "data.synthetic.");
      read(s, "eval_counts", c.synthetic.eval_counts, "data.synthetic.");
      read(s, "calib_counts", c.synthetic.calib_counts, "data.synthetic.");
      read(s, "height", c.synthetic.height, "data.synthetic.");
      read(s, "width", c.synthetic.width, "data.synthetic.");
      read(s, "noise", c.synthetic.noise, "data.synthetic.");
      read(s, "amplitude", c.synthetic.amplitude, "data.synthetic.");
      if (s.contains("seed")) {
        if (s["seed"].is_null()) {
          c.synthetic_seed.reset();
        } else {
          std::uint64_t v = 0;
          read(s, "seed", v, "data.synthetic.");
          c.synthetic_seed = v;
        }
      }
    }
  }
  if (j.contains("macro")) {
    const auto& m = j["macro"];
    detail::reject_unknown(m, {"n_groups", "blocks_per_group", "stem_out_channels", "input_channels", "num_classes",
                               "height", "width"},
                           "macro");
    read(m, "n_groups", c.macro.n_groups, "macro.");
    read(m, "blocks_per_group", c.macro.blocks_per_group, "macro.");
    read(m, "stem_out_channels", c.macro.stem_out_channels, "macro.");
    read(m, "input_channels", c.macro.input_channels, "macro.");
    read(m, "num_classes", c.macro.num_classes, "macro.");
    read(m, "height", c.macro.height, "macro.");
    read(m, "width", c.macro.width, "macro.");
  }
  read(j, "lr_supernet", c.lr_supernet, "");
  read(j, "lr_retrain", c.lr_retrain, "");
  read(j, "lr_finetune", c.lr_finetune, "");
  read(j, "epochs_supernet", c.epochs_supernet, "");
  read(j, "epochs_retrain", c.epochs_retrain, "");
  read(j, "epochs_finetune", c.epochs_finetune, "");
  read(j, "batch_size", c.batch_size, "");
  if (j.contains("search")) {
    const auto& s = j["search"];
    detail::reject_unknown(s, {"rounds", "n_eval", "n_top", "p_mut"}, "search");
    read(s, "rounds", c.search.rounds, "search.");
    read(s, "n_eval", c.search.n_eval, "search.");
    read(s, "n_top", c.search.n_top, "search.");
    read(s, "p_mut", c.search.p_mut, "search.");
  }
  read(j, "tau_c", c.tau_c, "");
  read(j, "margin", c.margin, "");
  read(j, "window_floor", c.window_floor, "");
  if (j.contains("quantization")) {
    const auto& q = j["quantization"];
    detail::reject_unknown(q, {"weight_bits", "time_steps"}, "quantization");
    read(q, "weight_bits", c.quant.weight_bits, "quantization.");
    read(q, "time_steps", c.quant.time_steps, "quantization.");
  }
  if (j.contains("baselines")) {
    const auto& b = j["baselines"];
    detail::reject_unknown(b, {"random_sampling_k", "random_search_n"}, "baselines");
    read(b, "random_sampling_k", c.random_sampling_k, "baselines.");
    read(b, "random_search_n", c.random_search_n, "baselines.");
  }
  c.validate();
  return c;
}

/// A config document: its "preset" key (default desk) picks the base.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  std::string preset = "desk";
  if (j.is_object() && j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError("config key 'preset' must be a string");
    preset = j["preset"].get<std::string>();
  }
  return config_from_json(j, preset_config(preset));
}

inline PipelineConfig parse_config_text(const std::string& text, const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace tnas
