#pragma once

/// @file supernet.hpp
/// One-shot weight-sharing supernet trained with single-path uniform sampling.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tnas/genome.hpp"
#include "tnas/network.hpp"

namespace tnas {

/// Holds the parameters of every candidate operation at once. A sampled path
/// reads and updates exactly one candidate per searchable block.
struct Supernet {
  MacroConfig config;
  ParameterSet params;
  OptimizerState optimizer;

  static Supernet initialize(const MacroConfig& cfg, Rng& rng) {
    Supernet s{cfg, {}, {}};
    for (const auto& spec : supernet_conv_specs(cfg)) {
      s.params.convs.emplace(spec.name, init_conv(spec, NormMode::BatchNorm, rng));
    }
    s.params.head = init_head(head_in_features(cfg), cfg.num_classes, rng);
    return s;
  }
};

/// Extracts a standalone subnet (a copy of the path's parameters). With
/// `fuse` every BN is folded into its convolution.
inline Network build_subnet(const Supernet& supernet, const Genome& genome, bool fuse) {
  Network net{supernet.config, genome, {}};
  for (const auto& spec : plan_layers(supernet.config, genome)) {
    if (spec.kind != LayerKind::Conv) continue;
    const auto& src = supernet.params.conv(spec.name);
    net.params.convs.emplace(spec.name, fuse ? fuse_conv_bn(src) : src);
  }
  net.params.head = supernet.params.head;
  return net;
}

/// Samples one genome, trains only its path on the batch, returns the loss
/// before the update and the genome used.
struct SupernetStep {
  double loss = 0.0;
  Genome genome;
};

inline double supernet_train_step_with(Supernet& supernet, const Genome& genome, const Tensor& batch,
                                       std::span<const int> labels, const AdamHyper& hyper) {
  const auto plan = plan_layers(supernet.config, genome);
  Tape tape;
  Tensor logits = forward(plan, supernet.params, batch, {true, nullptr}, &tape);
  auto lg = nn::softmax_cross_entropy(logits, labels);
  require_finite_loss(lg.loss, "supernet_train_step");
  auto grads = backward(plan, supernet.params, tape, lg.grad_logits);
  apply_gradients(supernet.params, grads, supernet.optimizer, hyper);
  return lg.loss;
}

inline SupernetStep supernet_train_step(Supernet& supernet, const Tensor& batch, std::span<const int> labels,
                                        const AdamHyper& hyper, Rng& rng) {
  SupernetStep step;
  step.genome = sample_uniform_genome(supernet.config.searchable_blocks(), rng);
  step.loss = supernet_train_step_with(supernet, step.genome, batch, labels, hyper);
  return step;
}

}  // namespace tnas
