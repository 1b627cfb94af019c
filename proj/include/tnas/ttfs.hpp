#pragma once

/// @file ttfs.hpp
/// Time-to-first-spike networks under the two-phase (B1) neuron model.
///
/// Layer n integrates input spikes during its first phase, which ends at
/// t_min(n):  tau_c dV/dt = sum_j W_ij H(t - t_j).  From t_min(n) to t_max(n)
/// the slope is fixed to 1/tau_c and the neuron fires once when V reaches its
/// threshold. Windows chain: t_min(n) == t_max(n-1).
///
/// With a_j = (t_max(n-1) - t_j) / tau_c the potential at t_min is
/// V = sum_j W_ij a_j and the spike time is t_min + tau_c (theta_i - V), so
/// the decoded output (t_max - t_i) / tau_c equals ReLU(W a + b) for
/// b = -theta + (t_max - t_min) / tau_c. That identity drives everything here:
/// conversion from a fused ReLU network, calibration of t_max, and the
/// closed-form forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tnas/error.hpp"
#include "tnas/genome.hpp"
#include "tnas/network.hpp"
#include "tnas/nn.hpp"
#include "tnas/tensor.hpp"

namespace tnas::ttfs {

inline constexpr double kNoSpike = std::numeric_limits<double>::infinity();

inline bool has_spike(double t) { return t != kNoSpike; }

/// Spike times of one layer's neurons, with a leading batch dimension.
struct SpikeRecord {
  double window_min = 0.0;  // window of the layer that produced the spikes
  double window_max = 0.0;
  Shape shape;              // [B, C, H, W] or [B, N]
  std::vector<double> times;
  std::size_t emitted = 0;
  std::size_t calibration_violations = 0;

  std::size_t batch() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t per_sample() const { return batch() ? times.size() / batch() : 0; }
};

enum class TtfsKind { Conv, Pool, Dense };

struct TtfsLayer {
  TtfsKind kind = TtfsKind::Conv;
  std::string name;        // parameter key of the ANN counterpart
  Tensor weights;          // conv [out, in, k, k]; dense [out, in]
  Tensor thresholds;       // [out]
  double t_min = 0.0;
  double t_max = 0.0;
  double tau_c = 1.0;
  std::size_t spatial_average = 1;  // dense: each input channel is averaged over this many positions
  bool readout = false;             // output layer: decoded value is shifted down by readout_offset
  double readout_offset = 0.0;

  bool weighted() const { return kind != TtfsKind::Pool; }
  std::size_t units() const { return thresholds.size(); }
};

struct QuantizationSpec {
  int weight_bits = 8;
  int time_steps = 16;
  friend bool operator==(const QuantizationSpec&, const QuantizationSpec&) = default;
};

struct TtfsNetwork {
  MacroConfig config;
  Genome genome;
  double input_t_min = 0.0;
  double input_t_max = 1.0;
  double tau_c = 1.0;
  std::vector<TtfsLayer> layers;
  std::optional<QuantizationSpec> quant;

  void check_windows() const {
    double prev = input_t_max;
    for (const auto& l : layers) {
      if (!l.weighted()) continue;
      if (l.t_min != prev) throw ConfigError("ttfs: window chaining broken at layer '" + l.name + "'");
      if (!(l.t_min < l.t_max) || !(l.tau_c > 0.0)) {
        throw ConfigError("ttfs: invalid window at layer '" + l.name + "'");
      }
      prev = l.t_max;
    }
  }
};

// ----------------------------------------------------------- time quantizer

/// Snaps a spike time to the nearest of `steps` uniformly spaced values
/// spanning [t_min, t_max]. Absent spikes stay absent.
inline double snap_time(double t, double t_min, double t_max, int steps) {
  if (!has_spike(t)) return t;
  const double span = t_max - t_min;
  const double step = span / static_cast<double>(steps - 1);
  double k = std::round((t - t_min) / step);
  k = std::clamp(k, 0.0, static_cast<double>(steps - 1));
  return k == static_cast<double>(steps - 1) ? t_max : t_min + k * step;
}

// ------------------------------------------------------------------ encoding

/// Linear input coding t = t_max0 - tau_c * x; larger values spike earlier,
/// x = 0 spikes exactly at t_max0.
inline SpikeRecord encode_input(const Tensor& x, double t_min0, double t_max0, double tau_c) {
  double mx = 0.0;
  for (double v : x.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("encode_input: value " + std::to_string(v) + " outside [0,1]");
    mx = std::max(mx, v);
  }
  if (t_max0 - t_min0 < tau_c * mx) throw ConfigError("encode_input: input window shorter than tau_c * max(x)");
  SpikeRecord r{t_min0, t_max0, x.shape(), std::vector<double>(x.size()), x.size(), 0};
  for (std::size_t i = 0; i < x.size(); ++i) r.times[i] = t_max0 - tau_c * x[i];
  return r;
}

/// Decoded activations (t_max - t) / tau_c; no spike decodes to 0. Readout
/// layers subtract their offset.
inline Tensor decode_output(const SpikeRecord& spikes, const TtfsLayer& layer) {
  Tensor a(spikes.shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = spikes.times[i];
    a[i] = has_spike(t) ? (layer.t_max - t) / layer.tau_c : 0.0;
    if (layer.readout) a[i] -= layer.readout_offset;
  }
  return a;
}

namespace detail {

// Potential contributed by each input at t_min: (t_min - t_j) / tau_c for
// spikes before t_min, zero otherwise (later spikes are never integrated).
inline Tensor integrated_inputs(const SpikeRecord& in, double t_min, double tau_c) {
  Tensor a(in.shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = in.times[i];
    a[i] = t < t_min ? (t_min - t) / tau_c : 0.0;
  }
  return a;
}

inline Tensor membrane_at_t_min(const SpikeRecord& in, const TtfsLayer& layer) {
  Tensor a = integrated_inputs(in, layer.t_min, layer.tau_c);
  if (layer.kind == TtfsKind::Conv) {
    if (a.rank() != 4) throw ConfigError("ttfs conv layer '" + layer.name + "' expects [B,C,H,W] spikes");
    return nn::conv2d_forward(a, layer.weights);
  }
  // dense, optionally averaging each input channel over its spatial positions
  const std::size_t b = a.dim(0);
  Tensor flat;
  if (layer.spatial_average > 1) {
    if (a.rank() != 4) throw ConfigError("ttfs dense layer '" + layer.name + "' expects [B,C,H,W] spikes");
    flat = nn::global_avg_pool_forward(a);
  } else {
    flat = a.reshaped({b, a.size() / b});
  }
  LinearParams lp{layer.weights, Tensor({layer.units()}, 0.0)};
  return nn::linear_forward(flat, lp);
}

}  // namespace detail

/// Closed-form B1 forward of one weighted layer. Spikes that would fire at or
/// before t_min (the potential crossed during the first phase, i.e. the
/// calibration was violated) are clamped to just after t_min and counted.
inline SpikeRecord layer_forward_closed_form(const SpikeRecord& in, const TtfsLayer& layer,
                                             std::optional<int> time_steps = std::nullopt) {
  if (layer.kind == TtfsKind::Pool) throw ConfigError("layer_forward_closed_form: pool layer has no neurons");
  Tensor v = detail::membrane_at_t_min(in, layer);
  SpikeRecord out{layer.t_min, layer.t_max, v.shape(), std::vector<double>(v.size(), kNoSpike), 0, 0};
  const std::size_t units = layer.units();
  const std::size_t per_unit = v.size() / v.dim(0) / units;  // spatial positions per channel
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t unit = (i / per_unit) % units;
    double t = layer.t_min + layer.tau_c * (layer.thresholds[unit] - v[i]);
    if (t > layer.t_max) continue;
    if (t <= layer.t_min) {
      t = std::nextafter(layer.t_min, kNoSpike);
      ++out.calibration_violations;
    }
    if (time_steps) t = snap_time(t, layer.t_min, layer.t_max, *time_steps);
    out.times[i] = t;
    ++out.emitted;
  }
  return out;
}

/// Earliest spike in each 2x2 window; the window of the record is unchanged.
inline SpikeRecord pool_forward(const SpikeRecord& in) {
  if (in.shape.size() != 4) throw ConfigError("ttfs pool expects [B,C,H,W] spikes");
  const std::size_t bc = in.shape[0] * in.shape[1], h = in.shape[2], w = in.shape[3];
  const std::size_t oh = h / 2, ow = w / 2;
  SpikeRecord out{in.window_min, in.window_max, {in.shape[0], in.shape[1], oh, ow}, {}, 0, 0};
  out.times.assign(bc * oh * ow, kNoSpike);
  std::size_t o = 0;
  for (std::size_t n = 0; n < bc; ++n) {
    const double* p = in.times.data() + n * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        const double t = std::min({p[2 * i * w + 2 * j], p[2 * i * w + 2 * j + 1], p[(2 * i + 1) * w + 2 * j],
                                   p[(2 * i + 1) * w + 2 * j + 1]});
        out.times[o] = t;
        if (has_spike(t)) ++out.emitted;
      }
    }
  }
  return out;
}

// -------------------------------------------------------- exact event oracle

struct ExactResult {
  SpikeRecord spikes;
  std::vector<std::size_t> early;  // flat indices that crossed threshold before t_min
};

namespace detail {

struct Synapse {
  double time;
  double weight;
  std::size_t source;
};

// Incoming synapses of output neuron `flat` (within one sample) that carry a
// spike, enumerated straight from the connectivity.
inline std::vector<Synapse> incoming(const SpikeRecord& in, std::size_t sample, const TtfsLayer& layer,
                                     std::size_t unit, std::size_t oy, std::size_t ox) {
  std::vector<Synapse> syn;
  const std::size_t per = in.per_sample();
  const double* times = in.times.data() + sample * per;
  if (layer.kind == TtfsKind::Conv) {
    const std::size_t cin = in.shape[1], h = in.shape[2], w = in.shape[3];
    const std::size_t k = layer.weights.dim(2);
    const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t dy = 0; dy < k; ++dy) {
        for (std::size_t dx = 0; dx < k; ++dx) {
          const auto y = static_cast<std::ptrdiff_t>(oy + dy) - pad;
          const auto x = static_cast<std::ptrdiff_t>(ox + dx) - pad;
          if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t src = (c * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x);
          if (!has_spike(times[src])) continue;
          syn.push_back({times[src], layer.weights.at4(unit, c, dy, dx), src});
        }
      }
    }
  } else {
    const std::size_t in_features = layer.weights.dim(1);
    const std::size_t positions = layer.spatial_average;
    for (std::size_t src = 0; src < per; ++src) {
      if (!has_spike(times[src])) continue;
      const std::size_t feature = src / positions;
      if (feature >= in_features) throw ConfigError("ttfs dense layer input width mismatch");
      syn.push_back({times[src], layer.weights.at2(unit, feature) / static_cast<double>(positions), src});
    }
  }
  return syn;
}

}  // namespace detail

/// Event-driven integration of the B1 dynamics for one weighted layer.
/// Piecewise-linear potential through the sorted input spikes in phase one
/// (starting from V = 0 at the input window start), then slope 1/tau_c until
/// t_max. Crossings during phase one are reported as early, never clamped.
inline ExactResult layer_forward_exact(const SpikeRecord& in, const TtfsLayer& layer) {
  if (layer.kind == TtfsKind::Pool) return {pool_forward(in), {}};
  const std::size_t batch = in.batch();
  std::size_t oh = 1, ow = 1;
  Shape shape{batch, layer.units()};
  if (layer.kind == TtfsKind::Conv) {
    oh = in.shape[2];
    ow = in.shape[3];
    shape = {batch, layer.units(), oh, ow};
  }
  ExactResult res;
  res.spikes = {layer.t_min, layer.t_max, shape, std::vector<double>(shape_numel(shape), kNoSpike), 0, 0};
  const double tau = layer.tau_c;
  std::size_t flat = 0;
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t u = 0; u < layer.units(); ++u) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x, ++flat) {
          auto syn = detail::incoming(in, s, layer, u, y, x);
          std::stable_sort(syn.begin(), syn.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
          const double theta = layer.thresholds[u];
          double v = 0.0, slope = 0.0, now = in.window_min;
          std::optional<double> fire;
          bool early = false;
          if (theta <= 0.0) {
            fire = now;
            early = true;
          }
          std::size_t e = 0;
          while (!fire && now < layer.t_min) {
            // absorb every event at the current instant
            while (e < syn.size() && syn[e].time <= now) slope += syn[e++].weight;
            const double next = (e < syn.size() && syn[e].time < layer.t_min) ? syn[e].time : layer.t_min;
            const double v_next = v + slope * (next - now) / tau;
            if (slope > 0.0 && v_next >= theta) {
              fire = now + tau * (theta - v) / slope;
              early = true;
              break;
            }
            v = v_next;
            now = next;
          }
          if (!fire) {
            const double t = layer.t_min + tau * (theta - v);
            if (t <= layer.t_max) fire = t;
          }
          if (fire) {
            res.spikes.times[flat] = *fire;
            ++res.spikes.emitted;
            if (early) res.early.push_back(flat);
          }
        }
      }
    }
  }
  return res;
}

// ------------------------------------------------------------ network pass

struct NetworkTrace {
  std::vector<SpikeRecord> records;  // records[0] is the input, then one per layer
  std::size_t calibration_violations = 0;

  const SpikeRecord& output() const { return records.back(); }
};

inline NetworkTrace forward_network(const TtfsNetwork& net, const Tensor& x) {
  NetworkTrace tr;
  SpikeRecord cur = encode_input(x, net.input_t_min, net.input_t_max, net.tau_c);
  if (net.quant) {
    for (auto& t : cur.times) t = snap_time(t, net.input_t_min, net.input_t_max, net.quant->time_steps);
  }
  tr.records.push_back(cur);
  const int steps = net.quant ? net.quant->time_steps : 0;
  for (const auto& layer : net.layers) {
    if (layer.kind == TtfsKind::Pool) {
      cur = pool_forward(cur);
    } else {
      cur = steps ? layer_forward_closed_form(cur, layer, steps) : layer_forward_closed_form(cur, layer);
    }
    tr.calibration_violations += cur.calibration_violations;
    tr.records.push_back(cur);
  }
  return tr;
}

/// Decoded output of the readout layer, [B, classes].
inline Tensor decode_logits(const TtfsNetwork& net, const NetworkTrace& trace) {
  return decode_output(trace.output(), net.layers.back());
}

/// Class whose output neuron spikes first; ties and silence resolve to the
/// lowest index.
inline std::vector<int> earliest_spike_class(const NetworkTrace& trace) {
  const auto& out = trace.output();
  const std::size_t b = out.batch(), c = out.per_sample();
  std::vector<int> cls(b, 0);
  for (std::size_t n = 0; n < b; ++n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < c; ++i) {
      if (out.times[n * c + i] < out.times[n * c + best]) best = i;
    }
    cls[n] = static_cast<int>(best);
  }
  return cls;
}

// ----------------------------------------------------------------- mapping

/// Windows for every weighted layer, in network order.
struct WindowSchedule {
  double input_t_min = 0.0;
  double input_t_max = 1.0;
  double tau_c = 1.0;
  std::vector<double> lengths;  // t_max - t_min per weighted layer
  double readout_offset = 0.0;
};

/// Builds the spiking network for a fused ReLU network under fixed windows:
/// W = w and theta = -b + (t_max - t_min) / tau_c (plus the readout offset on
/// the output layer).
inline TtfsNetwork map_ann_to_snn_fixed(const Network& ann, const WindowSchedule& windows) {
  if (!ann.is_fused()) throw ConfigError("map_ann_to_snn: network still has unfused batch normalization");
  TtfsNetwork snn;
  snn.config = ann.config;
  snn.genome = ann.genome;
  snn.input_t_min = windows.input_t_min;
  snn.input_t_max = windows.input_t_max;
  snn.tau_c = windows.tau_c;
  double t = windows.input_t_max;
  std::size_t weighted = 0;
  std::size_t gap_positions = 0;
  for (const auto& spec : ann.plan()) {
    if (spec.kind == LayerKind::MaxPool) {
      snn.layers.push_back({TtfsKind::Pool, "", {}, {}, t, t, windows.tau_c, 1, false, 0.0});
      continue;
    }
    if (spec.kind == LayerKind::GlobalAvgPool) {
      gap_positions = spec.height * spec.width;
      continue;
    }
    if (weighted >= windows.lengths.size()) throw ConfigError("map_ann_to_snn: window schedule too short");
    TtfsLayer layer;
    layer.name = spec.name;
    layer.tau_c = windows.tau_c;
    layer.t_min = t;
    layer.t_max = t + windows.lengths[weighted];
    const double span = windows.lengths[weighted] / windows.tau_c;
    const Tensor* bias = nullptr;
    if (spec.kind == LayerKind::Conv) {
      const auto& p = ann.params.conv(spec.name);
      layer.kind = TtfsKind::Conv;
      layer.weights = p.kernel;
      bias = &*p.bias;
    } else {
      layer.kind = TtfsKind::Dense;
      layer.weights = ann.params.head.weight;
      layer.spatial_average = std::max<std::size_t>(gap_positions, 1);
      layer.readout = true;
      layer.readout_offset = windows.readout_offset;
      bias = &ann.params.head.bias;
    }
    layer.thresholds = Tensor(bias->shape());
    for (std::size_t i = 0; i < bias->size(); ++i) {
      layer.thresholds[i] = -((*bias)[i] + (layer.readout ? layer.readout_offset : 0.0)) + span;
    }
    t = layer.t_max;
    snn.layers.push_back(std::move(layer));
    ++weighted;
  }
  if (weighted != windows.lengths.size()) throw ConfigError("map_ann_to_snn: window schedule length mismatch");
  for (auto& l : snn.layers) {
    if (l.kind == TtfsKind::Pool) l.t_max = l.t_min;  // pools carry the previous window; no own span
  }
  return snn;
}

/// Inverse of the mapping: w = W, b = -theta + (t_max - t_min) / tau_c.
inline Network map_snn_to_ann(const TtfsNetwork& snn) {
  Network ann{snn.config, snn.genome, {}};
  for (const auto& l : snn.layers) {
    if (!l.weighted()) continue;
    const double span = (l.t_max - l.t_min) / l.tau_c;
    Tensor bias(l.thresholds.shape());
    for (std::size_t i = 0; i < bias.size(); ++i) {
      bias[i] = -l.thresholds[i] + span - (l.readout ? l.readout_offset : 0.0);
    }
    if (l.kind == TtfsKind::Conv) {
      ConvLayerParams p;
      p.kernel = l.weights;
      p.bias = std::move(bias);
      ann.params.convs.emplace(l.name, std::move(p));
    } else {
      ann.params.head = {l.weights, std::move(bias)};
    }
  }
  return ann;
}

inline WindowSchedule windows_of(const TtfsNetwork& snn) {
  WindowSchedule w{snn.input_t_min, snn.input_t_max, snn.tau_c, {}, 0.0};
  for (const auto& l : snn.layers) {
    if (!l.weighted()) continue;
    w.lengths.push_back(l.t_max - l.t_min);
    if (l.readout) w.readout_offset = l.readout_offset;
  }
  return w;
}

struct CalibrationOptions {
  double tau_c = 1.0;
  double margin = 1.2;  // alpha
  double floor = 1.0;   // minimum decoded window length
  double input_t_min = 0.0;
  double input_t_max = 1.0;
};

/// Per weighted layer maxima of ReLU activations (head: max and min logit)
/// over a calibration set.
struct ActivationRanges {
  std::vector<double> max_activation;
  double min_logit = 0.0;
};

inline ActivationRanges activation_ranges(const Network& ann, const Tensor& calibration,
                                          std::size_t chunk = 64) {
  const auto plan = ann.plan();
  ActivationRanges r;
  r.min_logit = std::numeric_limits<double>::infinity();
  const std::size_t n = calibration.dim(0);
  const std::size_t per = calibration.size() / n;
  bool first = true;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    Shape s = calibration.shape();
    s[0] = len;
    Tensor part(s, std::vector<double>(calibration.data() + start * per, calibration.data() + (start + len) * per));
    Tape tape;
    forward(plan, const_cast<ParameterSet&>(ann.params), part, {false, nullptr}, &tape);
    std::size_t w = 0;
    for (std::size_t i = 0; i < plan.size(); ++i) {
      if (plan[i].kind != LayerKind::Conv && plan[i].kind != LayerKind::Head) continue;
      const auto& out = tape.layers[i].output;
      double mx = -std::numeric_limits<double>::infinity();
      for (double v : out.values()) mx = std::max(mx, v);
      if (first) r.max_activation.push_back(mx);
      else r.max_activation[w] = std::max(r.max_activation[w], mx);
      if (plan[i].kind == LayerKind::Head) {
        for (double v : out.values()) r.min_logit = std::min(r.min_logit, v);
      }
      ++w;
    }
    first = false;
  }
  return r;
}

/// Calibrated conversion: t_max(n) = t_min(n) + tau_c * alpha * max(max activation, floor).
/// The readout layer is shifted by alpha * max(0, -min logit) so every logit
/// on the calibration set maps into its window.
inline TtfsNetwork map_ann_to_snn(const Network& ann, const Tensor& calibration, const CalibrationOptions& opt = {}) {
  if (!ann.is_fused()) throw ConfigError("map_ann_to_snn: network still has unfused batch normalization");
  if (calibration.empty() || calibration.dim(0) == 0) throw ConfigError("map_ann_to_snn: empty calibration set");
  const auto ranges = activation_ranges(ann, calibration);
  WindowSchedule w{opt.input_t_min, opt.input_t_max, opt.tau_c, {}, 0.0};
  w.readout_offset = opt.margin * std::max(0.0, -ranges.min_logit);
  for (std::size_t i = 0; i < ranges.max_activation.size(); ++i) {
    double mx = ranges.max_activation[i];
    if (i + 1 == ranges.max_activation.size()) mx += w.readout_offset;
    w.lengths.push_back(opt.tau_c * opt.margin * std::max(mx, opt.floor));
  }
  return map_ann_to_snn_fixed(ann, w);
}

// ------------------------------------------------------------ quantization

inline double weight_scale(const Tensor& w, int bits) {
  const double mx = w.max_abs();
  if (mx == 0.0) return 1.0;
  return mx / static_cast<double>((1 << (bits - 1)) - 1);
}

inline void snap_to_grid(Tensor& t, double scale) {
  for (auto& v : t.storage()) v = std::round(v / scale) * scale;
}

/// Symmetric per-layer weight quantization plus the time grid used by the
/// forward pass. Thresholds share their layer's weight grid.
inline TtfsNetwork quantize(const TtfsNetwork& net, int weight_bits = 8, int time_steps = 16) {
  if (weight_bits < 2 || time_steps < 2) throw ConfigError("quantize: need at least 2 bits and 2 time steps");
  TtfsNetwork q = net;
  for (auto& l : q.layers) {
    if (!l.weighted()) continue;
    const double scale = weight_scale(l.weights, weight_bits);
    snap_to_grid(l.weights, scale);
    snap_to_grid(l.thresholds, scale);
  }
  q.quant = QuantizationSpec{weight_bits, time_steps};
  return q;
}

// ----------------------------------------------------------------- SynOps

namespace detail {

inline std::size_t conv_fanout(std::size_t y, std::size_t x, std::size_t h, std::size_t w, std::size_t k,
                               std::size_t out_ch) {
  const std::size_t pad = (k - 1) / 2;
  const std::size_t y0 = y >= pad ? y - pad : 0, y1 = std::min(y + pad, h - 1);
  const std::size_t x0 = x >= pad ? x - pad : 0, x1 = std::min(x + pad, w - 1);
  return out_ch * (y1 - y0 + 1) * (x1 - x0 + 1);
}

// Sums fanout over input neurons; `count` decides which inputs contribute.
template <typename Pred>
std::size_t layer_fanout(const SpikeRecord& in, const TtfsLayer& layer, Pred&& count) {
  std::size_t total = 0;
  const std::size_t per = in.per_sample();
  for (std::size_t s = 0; s < in.batch(); ++s) {
    for (std::size_t i = 0; i < per; ++i) {
      if (!count(in.times[s * per + i])) continue;
      if (layer.kind == TtfsKind::Conv) {
        const std::size_t h = in.shape[2], w = in.shape[3];
        const std::size_t pos = i % (h * w);
        total += conv_fanout(pos / w, pos % w, h, w, layer.weights.dim(2), layer.units());
      } else {
        total += layer.units();
      }
    }
  }
  return total;
}

}  // namespace detail

/// Synaptic operations of a completed pass: every input spike that arrives
/// before a layer's t_min is integrated once per outgoing synapse. Spikes at
/// exactly t_min (value 0) are never integrated. Pools cost nothing.
inline std::size_t count_synops(const TtfsNetwork& net, const NetworkTrace& trace) {
  if (trace.records.size() != net.layers.size() + 1) throw ConfigError("count_synops: trace does not match network");
  std::size_t total = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    if (!layer.weighted()) continue;
    total += detail::layer_fanout(trace.records[l], layer, [&](double t) { return t < layer.t_min; });
  }
  return total;
}

/// Number of synapses traversed if every neuron spiked once (per batch of the trace).
inline std::size_t total_synapses(const TtfsNetwork& net, const NetworkTrace& trace) {
  std::size_t total = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    if (!layer.weighted()) continue;
    total += detail::layer_fanout(trace.records[l], layer, [](double) { return true; });
  }
  return total;
}

// ------------------------------------------------------- SNN-side training

/// Loss gradients with respect to the spiking parameters (W, theta) at fixed
/// windows: dL/dW = dL/dw and dL/dtheta = -dL/db.
struct SnnGradients {
  std::vector<Tensor> weights;     // per weighted layer
  std::vector<Tensor> thresholds;  // per weighted layer
  double loss = 0.0;
};

inline SnnGradients snn_gradients(const TtfsNetwork& snn, const Tensor& x, std::span<const int> labels) {
  Network ann = map_snn_to_ann(snn);
  const auto plan = ann.plan();
  Tape tape;
  Tensor logits = forward(plan, ann.params, x, {false, nullptr}, &tape);
  auto lg = nn::softmax_cross_entropy(logits, labels);
  auto g = backward(plan, ann.params, tape, lg.grad_logits);
  SnnGradients out;
  out.loss = lg.loss;
  for (const auto& l : snn.layers) {
    if (!l.weighted()) continue;
    Tensor db;
    if (l.kind == TtfsKind::Conv) {
      out.weights.push_back(g.convs.at(l.name).kernel);
      db = *g.convs.at(l.name).bias;
    } else {
      out.weights.push_back(g.head_weight);
      db = g.head_bias;
    }
    for (auto& v : db.storage()) v = -v;
    out.thresholds.push_back(std::move(db));
  }
  return out;
}

/// Adam on (W, theta) with the windows held fixed.
inline void snn_adam_step(TtfsNetwork& snn, const SnnGradients& grads, OptimizerState& opt, const AdamHyper& hyper) {
  std::size_t w = 0;
  for (auto& l : snn.layers) {
    if (!l.weighted()) continue;
    const std::string key = l.kind == TtfsKind::Conv ? l.name : std::string("head");
    adam_step(l.weights, grads.weights.at(w), opt.slots[key + ".weights"], hyper);
    adam_step(l.thresholds, grads.thresholds.at(w), opt.slots[key + ".thresholds"], hyper);
    ++w;
  }
}

}  // namespace tnas::ttfs
