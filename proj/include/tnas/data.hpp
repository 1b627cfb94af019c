#pragma once

/// @file data.hpp
/// Event-frame datasets: the EVF1 frame format, the CSV manifest, a seeded
/// synthetic generator and batching.
///
/// Frame file: "EVF1", then little-endian u32 C, H, W, then C*H*W
/// little-endian float32 values in [C][H][W] order.
///
/// Manifest: CSV with header `path,label,split,condition`. Paths are relative
/// to the manifest's directory. An optional first line
/// `# num_classes=7 channels=4 height=32 width=32` declares the shape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tnas/binary_io.hpp"
#include "tnas/error.hpp"
#include "tnas/tensor.hpp"

namespace tnas {

inline constexpr char kFrameMagic[4] = {'E', 'V', 'F', '1'};

struct EventFrameSample {
  Tensor frame;  // [C, H, W] in [0, 1]
  int label = 0;
  std::string split = "train";
  std::string condition;
  std::string path;  // relative to the manifest, empty for in-memory samples
};

struct Dataset {
  std::size_t num_classes = 7;
  std::size_t channels = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<EventFrameSample> samples;
  std::size_t clamped_values = 0;  // out-of-range values clamped at load time

  std::vector<std::size_t> indices(const std::string& split) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].split == split) idx.push_back(i);
    }
    return idx;
  }

  std::size_t count(const std::string& split) const { return indices(split).size(); }
};

/// Stacked frames [B, C, H, W] and labels.
struct Batch {
  Tensor inputs;
  std::vector<int> labels;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ConfigError("make_batch: empty index list");
  const std::size_t per = ds.channels * ds.height * ds.width;
  Batch b{Tensor({idx.size(), ds.channels, ds.height, ds.width}), {}};
  b.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = ds.samples.at(idx[i]);
    std::copy(s.frame.data(), s.frame.data() + per, b.inputs.data() + i * per);
    b.labels.push_back(s.label);
  }
  return b;
}

inline Batch split_batch(const Dataset& ds, const std::string& split) {
  auto idx = ds.indices(split);
  if (idx.empty()) throw ConfigError("dataset has no '" + split + "' samples");
  return make_batch(ds, idx);
}

// ------------------------------------------------------------- frame files

inline std::vector<char> encode_frame(const Tensor& frame) {
  std::vector<char> out(kFrameMagic, kFrameMagic + 4);
  for (std::size_t d = 0; d < 3; ++d) io::put_le(out, static_cast<std::uint32_t>(frame.dim(d)));
  for (double v : frame.values()) io::put_f32(out, static_cast<float>(v));
  return out;
}

struct DecodedFrame {
  Tensor frame;
  std::size_t clamped = 0;
};

inline DecodedFrame decode_frame(const std::vector<char>& bytes, const std::string& path) {
  if (bytes.size() < 16 || !std::equal(kFrameMagic, kFrameMagic + 4, bytes.begin())) {
    throw FormatError(path + ": bad frame magic (expected EVF1)");
  }
  const auto c = io::get_le<std::uint32_t>(bytes.data() + 4);
  const auto h = io::get_le<std::uint32_t>(bytes.data() + 8);
  const auto w = io::get_le<std::uint32_t>(bytes.data() + 12);
  if (c == 0 || h == 0 || w == 0) throw FormatError(path + ": zero frame dimension");
  const std::size_t n = static_cast<std::size_t>(c) * h * w;
  if (bytes.size() != 16 + 4 * n) {
    throw FormatError(path + ": expected " + std::to_string(16 + 4 * n) + " bytes, found " + std::to_string(bytes.size()));
  }
  DecodedFrame out{Tensor({c, h, w}), 0};
  for (std::size_t i = 0; i < n; ++i) {
    double v = io::get_f32(bytes.data() + 16 + 4 * i);
    if (std::isnan(v)) throw FormatError(path + ": NaN value in frame");
    if (v < 0.0 || v > 1.0) {
      v = std::clamp(v, 0.0, 1.0);
      ++out.clamped;
    }
    out.frame[i] = v;
  }
  return out;
}

// ---------------------------------------------------------------- manifest

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

inline std::map<std::string, std::string> parse_meta(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream is(line.substr(1));
  std::string tok;
  while (is >> tok) {
    auto eq = tok.find('=');
    if (eq != std::string::npos) kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

}  // namespace detail

struct LoadOptions {
  std::optional<std::size_t> num_classes;  // overrides/assumes when the manifest declares none
  bool allow_calib_in_train = false;
};

/// Loads a manifest and every frame it names, in manifest order.
inline Dataset load_dataset(const std::string& manifest_path, const LoadOptions& opt = {}) {
  std::ifstream in(manifest_path);
  if (!in) throw MissingArtifact("cannot open manifest " + manifest_path);
  const auto root = std::filesystem::path(manifest_path).parent_path();
  Dataset ds;
  std::optional<std::size_t> declared_classes = opt.num_classes;
  std::optional<std::size_t> c, h, w;
  std::string line;
  bool header_seen = false;
  std::size_t line_no = 0;
  std::map<std::string, std::set<std::string>> splits_of_path;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto kv = detail::parse_meta(line);
      if (kv.count("num_classes")) declared_classes = std::stoul(kv["num_classes"]);
      if (kv.count("channels")) c = std::stoul(kv["channels"]);
      if (kv.count("height")) h = std::stoul(kv["height"]);
      if (kv.count("width")) w = std::stoul(kv["width"]);
      continue;
    }
    if (!header_seen) {
      if (line != "path,label,split,condition") {
        throw FormatError(manifest_path + ": expected header 'path,label,split,condition'");
      }
      header_seen = true;
      continue;
    }
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 4) throw FormatError(manifest_path + ":" + std::to_string(line_no) + ": expected 4 columns");
    EventFrameSample s;
    s.path = cells[0];
    s.split = cells[2];
    s.condition = cells[3];
    if (s.split != "train" && s.split != "eval" && s.split != "calib") {
      throw FormatError(manifest_path + ":" + std::to_string(line_no) + ": unknown split '" + s.split + "'");
    }
    try {
      s.label = std::stoi(cells[1]);
    } catch (const std::exception&) {
      throw FormatError(manifest_path + ":" + std::to_string(line_no) + ": bad label '" + cells[1] + "'");
    }
    const auto full = (root / s.path).string();
    if (s.label < 0 || (declared_classes && static_cast<std::size_t>(s.label) >= *declared_classes)) {
      throw FormatError(full + ": label " + cells[1] + " out of range");
    }
    if (!std::filesystem::exists(full)) throw MissingArtifact("missing frame file " + full);
    auto decoded = decode_frame(io::read_file(full), full);
    if (!c) {
      c = decoded.frame.dim(0);
      h = decoded.frame.dim(1);
      w = decoded.frame.dim(2);
    }
    if (decoded.frame.shape() != Shape{*c, *h, *w}) {
      throw FormatError(full + ": frame shape " + shape_string(decoded.frame.shape()) + " differs from declared " +
                        shape_string({*c, *h, *w}));
    }
    ds.clamped_values += decoded.clamped;
    s.frame = std::move(decoded.frame);
    splits_of_path[s.path].insert(s.split);
    ds.samples.push_back(std::move(s));
  }
  for (const auto& [path, splits] : splits_of_path) {
    if (splits.size() < 2) continue;
    const bool calib_train_only = splits == std::set<std::string>{"calib", "train"};
    if (!(calib_train_only && opt.allow_calib_in_train)) {
      throw FormatError(manifest_path + ": " + path + " appears in more than one split");
    }
  }
  int max_label = -1;
  for (const auto& s : ds.samples) max_label = std::max(max_label, s.label);
  ds.num_classes = declared_classes.value_or(static_cast<std::size_t>(std::max(max_label + 1, 1)));
  ds.channels = c.value_or(4);
  ds.height = h.value_or(32);
  ds.width = w.value_or(32);
  return ds;
}

/// Writes frames under `dir/frames/` and `dir/manifest.csv`.
inline std::string write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "frames");
  std::ostringstream csv;
  csv << "# num_classes=" << ds.num_classes << " channels=" << ds.channels << " height=" << ds.height
      << " width=" << ds.width << "\n";
  csv << "path,label,split,condition\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    std::string rel = s.path;
    if (rel.empty()) {
      std::ostringstream name;
      name << "frames/" << s.split << "_" << i << ".evf";
      rel = name.str();
    }
    io::write_file((fs::path(dir) / rel).string(), encode_frame(s.frame));
    csv << rel << ',' << s.label << ',' << s.split << ',' << s.condition << '\n';
  }
  const auto manifest = (fs::path(dir) / "manifest.csv").string();
  io::write_text(manifest, csv.str());
  return manifest;
}

// --------------------------------------------------------------- synthetic

/// Desk-scale stand-in for eye-region event frames.
struct SyntheticSpec {
  std::size_t num_classes = 7;
  std::vector<std::size_t> train_counts;  // per class; empty = 20 each
  std::vector<std::size_t> eval_counts;   // per class; empty = 10 each
  std::vector<std::size_t> calib_counts;  // per class; empty = ceil(10% of train)
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.1;      // additive Gaussian sigma
  double amplitude = 0.8;  // blob peak before noise
  std::uint64_t seed = 0;
};

/// Noise-free frame of one class: an oriented anisotropic Gaussian blob whose
/// position and orientation depend on the class; across the 4 channels the
/// blob drifts along its major axis and alternates polarity weighting.
inline Tensor class_pattern(std::size_t cls, std::size_t num_classes, std::size_t h, std::size_t w,
                            double amplitude) {
  constexpr std::size_t kChannels = 4;
  Tensor f({kChannels, h, w});
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(num_classes);
  const double orient = std::numbers::pi * static_cast<double>(cls) / static_cast<double>(num_classes);
  const double cx = 0.5 * static_cast<double>(w) + 0.22 * static_cast<double>(w) * std::cos(angle);
  const double cy = 0.5 * static_cast<double>(h) + 0.22 * static_cast<double>(h) * std::sin(angle);
  const double s_major = 0.16 * static_cast<double>(w), s_minor = 0.06 * static_cast<double>(w);
  const double ux = std::cos(orient), uy = std::sin(orient);
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    const double drift = (static_cast<double>(ch) - 1.5) * 0.05 * static_cast<double>(w);
    const double px = cx + drift * ux, py = cy + drift * uy;
    const double gain = (ch % 2 == 0) ? 1.0 : 0.6;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - px, dy = static_cast<double>(y) - py;
        const double u = dx * ux + dy * uy, v = -dx * uy + dy * ux;
        const double g = std::exp(-(u * u) / (2 * s_major * s_major) - (v * v) / (2 * s_minor * s_minor));
        f[(ch * h + y) * w + x] = amplitude * gain * g;
      }
    }
  }
  return f;
}

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.channels = 4;
  ds.height = spec.height;
  ds.width = spec.width;
  auto counts_or = [&](const std::vector<std::size_t>& v, std::size_t dflt) {
    if (v.empty()) return std::vector<std::size_t>(spec.num_classes, dflt);
    if (v.size() != spec.num_classes) throw ConfigError("synthetic: per-class counts must have num_classes entries");
    return v;
  };
  const auto train = counts_or(spec.train_counts, 20);
  const auto eval = counts_or(spec.eval_counts, 10);
  std::vector<std::size_t> calib = spec.calib_counts;
  if (calib.empty()) {
    for (auto t : train) calib.push_back((t + 9) / 10);
  } else if (calib.size() != spec.num_classes) {
    throw ConfigError("synthetic: calib counts must have num_classes entries");
  }
  std::vector<Tensor> patterns;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    patterns.push_back(class_pattern(c, spec.num_classes, spec.height, spec.width, spec.amplitude));
  }
  Rng rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto emit = [&](const std::vector<std::size_t>& counts, const char* split) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      for (std::size_t i = 0; i < counts[c]; ++i) {
        EventFrameSample s;
        s.frame = patterns[c];
        for (auto& v : s.frame.storage()) {
          if (spec.noise > 0.0) v += spec.noise * noise(rng);
          // stored as float32 on disk; keep the in-memory copy identical
          v = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
        }
        s.label = static_cast<int>(c);
        s.split = split;
        ds.samples.push_back(std::move(s));
      }
    }
  };
  emit(train, "train");
  emit(eval, "eval");
  emit(calib, "calib");
  return ds;
}

}  // namespace tnas
