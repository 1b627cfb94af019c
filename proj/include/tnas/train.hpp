#pragma once

/// @file train.hpp
/// Training and evaluation loops shared by the pipeline stages.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tnas/data.hpp"
#include "tnas/metrics.hpp"
#include "tnas/network.hpp"
#include "tnas/supernet.hpp"
#include "tnas/ttfs.hpp"

namespace tnas {

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 5e-3;
  std::uint64_t seed = 0;
};

/// Receives (epoch, step, loss) for every optimizer step.
using LossSink = std::function<void(std::size_t, std::size_t, double)>;

namespace detail {

// Shuffled mini-batches of the training split for one epoch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> idx, std::size_t batch_size,
                                                           Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < idx.size(); s += batch_size) {
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + batch_size)));
  }
  return out;
}

inline std::vector<std::size_t> train_indices(const Dataset& ds) {
  auto idx = ds.indices("train");
  if (idx.empty()) throw ConfigError("training split is empty");
  return idx;
}

}  // namespace detail

/// Plain mini-batch training of one architecture (BN or bias form).
inline void train_network(Network& net, const Dataset& ds, const TrainOptions& opt, const LossSink& sink = {}) {
  const auto plan = net.plan();
  const auto idx = detail::train_indices(ds);
  Rng rng(opt.seed);
  OptimizerState state;
  AdamHyper hyper;
  hyper.lr = opt.lr;
  std::size_t step = 0;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    for (const auto& b : detail::epoch_batches(idx, opt.batch_size, rng)) {
      auto batch = make_batch(ds, b);
      const double loss = train_step(net, plan, batch.inputs, batch.labels, state, hyper);
      if (sink) sink(e, step, loss);
      ++step;
    }
  }
}

/// Supernet training: one uniformly sampled path per mini-batch.
inline void train_supernet(Supernet& supernet, const Dataset& ds, const TrainOptions& opt, const LossSink& sink = {}) {
  const auto idx = detail::train_indices(ds);
  Rng rng(opt.seed);
  AdamHyper hyper;
  hyper.lr = opt.lr;
  std::size_t step = 0;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    for (const auto& b : detail::epoch_batches(idx, opt.batch_size, rng)) {
      auto batch = make_batch(ds, b);
      const auto res = supernet_train_step(supernet, batch.inputs, batch.labels, hyper, rng);
      if (sink) sink(e, step, res.loss);
      ++step;
    }
  }
}

// -------------------------------------------------------------- evaluation

inline constexpr std::size_t kEvalChunk = 64;

namespace detail {

template <typename PredictFn>
ConfusionMatrix evaluate_chunks(const Dataset& ds, const std::string& split, PredictFn&& predict) {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw ConfigError("evaluation split '" + split + "' is empty");
  ConfusionMatrix cm(ds.num_classes);
  for (std::size_t s = 0; s < idx.size(); s += kEvalChunk) {
    std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                  idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + kEvalChunk)));
    auto batch = make_batch(ds, part);
    const auto pred = predict(batch.inputs);
    for (std::size_t i = 0; i < pred.size(); ++i) cm.add(batch.labels[i], pred[i]);
  }
  return cm;
}

}  // namespace detail

/// Eval-mode ANN predictions (argmax of logits).
inline ConfusionMatrix evaluate_ann(const Network& net, const Dataset& ds, const std::string& split) {
  const auto plan = net.plan();
  return detail::evaluate_chunks(ds, split, [&](const Tensor& x) { return nn::argmax_rows(infer(plan, net.params, x)); });
}

struct SnnEvaluation {
  ConfusionMatrix confusion{1};
  std::size_t synops = 0;
  std::size_t synapses = 0;  // traversals if every neuron spiked
  std::size_t calibration_violations = 0;
  std::size_t samples = 0;
};

/// Spiking inference; the class is the earliest output spike.
inline SnnEvaluation evaluate_snn(const ttfs::TtfsNetwork& snn, const Dataset& ds, const std::string& split) {
  SnnEvaluation ev;
  ev.confusion = detail::evaluate_chunks(ds, split, [&](const Tensor& x) {
    const auto trace = ttfs::forward_network(snn, x);
    ev.synops += ttfs::count_synops(snn, trace);
    ev.synapses += ttfs::total_synapses(snn, trace);
    ev.calibration_violations += trace.calibration_violations;
    ev.samples += x.dim(0);
    return ttfs::earliest_spike_class(trace);
  });
  return ev;
}

/// Inputs of one split stacked into a single tensor.
inline Tensor split_inputs(const Dataset& ds, const std::string& split) {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw ConfigError("split '" + split + "' is empty");
  return make_batch(ds, idx).inputs;
}

// ------------------------------------------------------------ SNN fine-tune

/// The ANN whose quantized forward reproduces the quantized spiking network
/// with the given windows: weights and thresholds snapped to the layer grid.
inline ParameterSet quantized_view(const Network& ann, const ttfs::WindowSchedule& windows,
                                   const ttfs::QuantizationSpec& q) {
  auto snn = ttfs::quantize(ttfs::map_ann_to_snn_fixed(ann, windows), q.weight_bits, q.time_steps);
  return ttfs::map_snn_to_ann(snn).params;
}

inline ActivationQuantizer activation_quantizer(const ttfs::WindowSchedule& w, int steps) {
  ActivationQuantizer q;
  q.steps = static_cast<std::size_t>(steps);
  q.input_range = (w.input_t_max - w.input_t_min) / w.tau_c;
  for (double len : w.lengths) q.ranges.push_back(len / w.tau_c);
  q.head_offset = w.readout_offset;
  return q;
}

/// Continued training of a spiking network through its ReLU counterpart.
/// Windows are recalibrated on the calibration split after every epoch; a
/// quantized network is trained with straight-through weight and time
/// quantizers and comes back quantized.
inline ttfs::TtfsNetwork finetune_snn(const ttfs::TtfsNetwork& snn, const Dataset& ds, const TrainOptions& opt,
                                      const ttfs::CalibrationOptions& calib, const LossSink& sink = {}) {
  Network ann = ttfs::map_snn_to_ann(snn);
  const auto plan = ann.plan();
  const auto idx = detail::train_indices(ds);
  const Tensor calib_x = split_inputs(ds, "calib");
  const auto qspec = snn.quant;
  auto windows = ttfs::windows_of(snn);
  Rng rng(opt.seed);
  OptimizerState state;
  AdamHyper hyper;
  hyper.lr = opt.lr;
  std::size_t step = 0;
  ttfs::TtfsNetwork current = snn;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    std::optional<ActivationQuantizer> aq;
    std::function<ParameterSet(const ParameterSet&)> view;
    if (qspec) {
      aq = activation_quantizer(windows, qspec->time_steps);
      view = [&](const ParameterSet& p) { return quantized_view(Network{ann.config, ann.genome, p}, windows, *qspec); };
    }
    for (const auto& b : detail::epoch_batches(idx, opt.batch_size, rng)) {
      auto batch = make_batch(ds, b);
      const double loss = train_step(ann, plan, batch.inputs, batch.labels, state, hyper, aq ? &*aq : nullptr, view);
      if (sink) sink(e, step, loss);
      ++step;
    }
    current = ttfs::map_ann_to_snn(ann, calib_x, calib);
    if (qspec) current = ttfs::quantize(current, qspec->weight_bits, qspec->time_steps);
    windows = ttfs::windows_of(current);
  }
  return current;
}

}  // namespace tnas
