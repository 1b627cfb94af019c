#pragma once

/// @file checkpoint.hpp
/// Checkpoint directories: manifest.json (magic "TNER1") naming every tensor
/// with its shape, plus one little-endian float64 blob per tensor under
/// tensors/. Spiking checkpoints add per-layer windows, tau_c and the
/// quantization descriptor to the manifest.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tnas/binary_io.hpp"
#include "tnas/error.hpp"
#include "tnas/network.hpp"
#include "tnas/supernet.hpp"
#include "tnas/ttfs.hpp"

namespace tnas::ckpt {

using json = nlohmann::ordered_json;

inline constexpr const char* kMagic = "TNER1";

enum class Kind { Network, Supernet, Snn };

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::Network: return "ann";
    case Kind::Supernet: return "supernet";
    case Kind::Snn: return "snn";
  }
  return "?";
}

inline json config_to_json(const MacroConfig& c) {
  return json{{"n_groups", c.n_groups},
              {"blocks_per_group", c.blocks_per_group},
              {"stem_out_channels", c.stem_out_channels},
              {"input_channels", c.input_channels},
              {"num_classes", c.num_classes},
              {"height", c.height},
              {"width", c.width}};
}

inline MacroConfig config_from_json(const json& j) {
  MacroConfig c;
  c.n_groups = j.value("n_groups", c.n_groups);
  c.blocks_per_group = j.value("blocks_per_group", c.blocks_per_group);
  c.stem_out_channels = j.value("stem_out_channels", c.stem_out_channels);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.validate();
  return c;
}

namespace detail {

inline std::vector<char> tensor_blob(const Tensor& t) {
  std::vector<char> out;
  out.reserve(t.size() * 8);
  for (double v : t.values()) io::put_f64(out, v);
  return out;
}

inline std::string blob_name(const std::string& tensor) { return "tensors/" + tensor + ".f64"; }

class Writer {
 public:
  explicit Writer(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::remove_all(dir_ / "tensors");  // stale blobs from an earlier save
    std::filesystem::create_directories(dir_ / "tensors");
  }
  void tensor(const std::string& name, const Tensor& t) {
    io::write_file((dir_ / blob_name(name)).string(), tensor_blob(t));
    tensors_.push_back(json{{"name", name}, {"shape", t.shape()}, {"file", blob_name(name)}});
  }
  void finish(json manifest) {
    manifest["tensors"] = tensors_;
    io::write_text((dir_ / "manifest.json").string(), manifest.dump(2) + "\n");
  }

 private:
  std::filesystem::path dir_;
  json tensors_ = json::array();
};

class Reader {
 public:
  explicit Reader(std::filesystem::path dir) : dir_(std::move(dir)) {
    const auto path = (dir_ / "manifest.json").string();
    if (!std::filesystem::exists(path)) throw MissingArtifact("checkpoint manifest not found: " + path);
    try {
      manifest_ = json::parse(io::read_text(path));
    } catch (const json::exception& e) {
      throw FormatError(path + ": " + e.what());
    }
    if (manifest_.value("magic", std::string()) != kMagic) throw FormatError(path + ": bad magic (expected TNER1)");
    for (const auto& t : manifest_.at("tensors")) index_[t.at("name").get<std::string>()] = t;
  }

  const json& manifest() const { return manifest_; }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError((dir_ / "manifest.json").string() + ": no tensor '" + name + "'");
    const Shape shape = it->second.at("shape").get<Shape>();
    const auto path = (dir_ / it->second.at("file").get<std::string>()).string();
    const auto bytes = io::read_file(path);
    if (bytes.size() != shape_numel(shape) * 8) {
      throw FormatError(path + ": blob holds " + std::to_string(bytes.size()) + " bytes, shape " + shape_string(shape) +
                        " needs " + std::to_string(shape_numel(shape) * 8));
    }
    std::vector<double> data(shape_numel(shape));
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = io::get_f64(bytes.data() + 8 * i);
    return Tensor(shape, std::move(data));
  }

 private:
  std::filesystem::path dir_;
  json manifest_;
  std::map<std::string, json> index_;
};

inline void write_params(Writer& w, const ParameterSet& p) {
  p.visit([&](const std::string& name, const Tensor& t) { w.tensor(name, t); });
}

// Rebuilds the parameter set from tensor names (convs recognized by suffix).
inline ParameterSet read_params(const Reader& r) {
  ParameterSet p;
  for (const auto& t : r.manifest().at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto pos = name.rfind(".kernel");
    if (pos == std::string::npos || pos + 7 != name.size()) continue;
    const auto layer = name.substr(0, pos);
    ConvLayerParams c;
    c.kernel = r.tensor(name);
    if (r.has(layer + ".bias")) c.bias = r.tensor(layer + ".bias");
    if (r.has(layer + ".bn.gamma")) {
      c.bn = BatchNormParams{r.tensor(layer + ".bn.gamma"), r.tensor(layer + ".bn.beta"),
                             r.tensor(layer + ".bn.running_mean"), r.tensor(layer + ".bn.running_var")};
    }
    p.convs.emplace(layer, std::move(c));
  }
  p.head = {r.tensor("head.weight"), r.tensor("head.bias")};
  return p;
}

inline Reader open(const std::string& dir, Kind expected) {
  Reader r(dir);
  const auto kind = r.manifest().value("kind", std::string());
  if (kind != kind_name(expected)) {
    throw FormatError(dir + ": checkpoint kind is '" + kind + "', expected '" + kind_name(expected) + "'");
  }
  return r;
}

}  // namespace detail

/// Kind stored in a checkpoint directory.
inline std::string peek_kind(const std::string& dir) {
  return detail::Reader(dir).manifest().value("kind", std::string());
}

inline void save(const Network& net, const std::string& dir) {
  detail::Writer w(dir);
  detail::write_params(w, net.params);
  w.finish(json{{"magic", kMagic}, {"kind", "ann"}, {"config", config_to_json(net.config)},
                {"genome", net.genome.str()}, {"fused", net.is_fused()}});
}

inline Network load_network(const std::string& dir) {
  auto r = detail::open(dir, Kind::Network);
  const auto& m = r.manifest();
  Network net{config_from_json(m.at("config")), Genome::parse(m.at("genome").get<std::string>()), detail::read_params(r)};
  for (const auto& spec : net.plan()) {
    if (spec.kind == LayerKind::Conv) net.params.conv(spec.name);  // throws if absent
  }
  return net;
}

inline void save(const Supernet& s, const std::string& dir) {
  detail::Writer w(dir);
  detail::write_params(w, s.params);
  w.finish(json{{"magic", kMagic}, {"kind", "supernet"}, {"config", config_to_json(s.config)}});
}

inline Supernet load_supernet(const std::string& dir) {
  auto r = detail::open(dir, Kind::Supernet);
  Supernet s{config_from_json(r.manifest().at("config")), detail::read_params(r), {}};
  for (const auto& spec : supernet_conv_specs(s.config)) s.params.conv(spec.name);
  return s;
}

inline void save(const ttfs::TtfsNetwork& snn, const std::string& dir) {
  detail::Writer w(dir);
  json layers = json::array();
  for (const auto& l : snn.layers) {
    if (l.kind == ttfs::TtfsKind::Pool) {
      layers.push_back(json{{"kind", "pool"}, {"t_min", l.t_min}, {"t_max", l.t_max}});
      continue;
    }
    const std::string key = l.kind == ttfs::TtfsKind::Conv ? l.name : std::string("head");
    w.tensor(key + ".weights", l.weights);
    w.tensor(key + ".thresholds", l.thresholds);
    layers.push_back(json{{"kind", l.kind == ttfs::TtfsKind::Conv ? "conv" : "dense"},
                          {"name", l.name},
                          {"t_min", l.t_min},
                          {"t_max", l.t_max},
                          {"tau_c", l.tau_c},
                          {"spatial_average", l.spatial_average},
                          {"readout", l.readout},
                          {"readout_offset", l.readout_offset}});
  }
  json m{{"magic", kMagic},
         {"kind", "snn"},
         {"config", config_to_json(snn.config)},
         {"genome", snn.genome.str()},
         {"input_window", {snn.input_t_min, snn.input_t_max}},
         {"tau_c", snn.tau_c},
         {"layers", layers}};
  m["quantization"] = snn.quant ? json{{"weight_bits", snn.quant->weight_bits}, {"time_steps", snn.quant->time_steps}}
                                : json(nullptr);
  w.finish(std::move(m));
}

inline ttfs::TtfsNetwork load_snn(const std::string& dir) {
  auto r = detail::open(dir, Kind::Snn);
  const auto& m = r.manifest();
  ttfs::TtfsNetwork snn;
  snn.config = config_from_json(m.at("config"));
  snn.genome = Genome::parse(m.at("genome").get<std::string>());
  snn.input_t_min = m.at("input_window").at(0).get<double>();
  snn.input_t_max = m.at("input_window").at(1).get<double>();
  snn.tau_c = m.at("tau_c").get<double>();
  for (const auto& jl : m.at("layers")) {
    ttfs::TtfsLayer l;
    const auto kind = jl.at("kind").get<std::string>();
    l.t_min = jl.at("t_min").get<double>();
    l.t_max = jl.at("t_max").get<double>();
    l.tau_c = snn.tau_c;
    if (kind == "pool") {
      l.kind = ttfs::TtfsKind::Pool;
    } else {
      l.kind = kind == "conv" ? ttfs::TtfsKind::Conv : ttfs::TtfsKind::Dense;
      l.name = jl.at("name").get<std::string>();
      l.tau_c = jl.at("tau_c").get<double>();
      l.spatial_average = jl.at("spatial_average").get<std::size_t>();
      l.readout = jl.at("readout").get<bool>();
      l.readout_offset = jl.at("readout_offset").get<double>();
      const std::string key = l.kind == ttfs::TtfsKind::Conv ? l.name : std::string("head");
      l.weights = r.tensor(key + ".weights");
      l.thresholds = r.tensor(key + ".thresholds");
    }
    snn.layers.push_back(std::move(l));
  }
  if (!m.at("quantization").is_null()) {
    snn.quant = ttfs::QuantizationSpec{m["quantization"].at("weight_bits").get<int>(),
                                       m["quantization"].at("time_steps").get<int>()};
  }
  snn.check_windows();
  return snn;
}

/// Spike times of one forward pass as CSV (layer, neuron, time); silent
/// neurons are omitted. Layer 0 is the encoded input.
inline std::string spike_trace_csv(const ttfs::NetworkTrace& trace) {
  std::ostringstream out;
  out.precision(17);
  out << "layer,neuron,time\n";
  for (std::size_t l = 0; l < trace.records.size(); ++l) {
    const auto& rec = trace.records[l];
    for (std::size_t i = 0; i < rec.times.size(); ++i) {
      if (ttfs::has_spike(rec.times[i])) out << l << ',' << i << ',' << rec.times[i] << '\n';
    }
  }
  return out.str();
}

}  // namespace tnas::ckpt
