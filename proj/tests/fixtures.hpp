#pragma once

// Small random networks and datasets shared by the unit and acceptance tests.

#include <cstddef>
#include <random>

#include "tnas/data.hpp"
#include "tnas/network.hpp"
#include "tnas/tensor.hpp"

namespace fixtures {

using namespace tnas;

inline MacroConfig small_config(std::size_t stem = 4, std::size_t size = 16) {
  MacroConfig c;
  c.stem_out_channels = stem;
  c.height = size;
  c.width = size;
  return c;
}

/// BN network with non-trivial running statistics and affine parameters.
inline Network random_bn_network(const MacroConfig& cfg, const Genome& g, Rng& rng) {
  auto net = Network::initialize(cfg, g, NormMode::BatchNorm, rng);
  for (auto& [name, c] : net.params.convs) {
    const std::size_t ch = c.out_channels();
    c.bn->gamma = uniform_tensor({ch}, 0.6, 1.4, rng);
    c.bn->beta = normal_tensor({ch}, 0.05, 0.2, rng);
    c.bn->running_mean = normal_tensor({ch}, 0.0, 0.3, rng);
    c.bn->running_var = uniform_tensor({ch}, 0.5, 2.0, rng);
  }
  net.params.head.bias = normal_tensor({cfg.num_classes}, 0.0, 0.3, rng);
  return net;
}

inline Network random_fused_network(const MacroConfig& cfg, const Genome& g, Rng& rng) {
  return fuse_bn(random_bn_network(cfg, g, rng));
}

inline Tensor random_inputs(const MacroConfig& cfg, std::size_t n, Rng& rng) {
  return uniform_tensor({n, cfg.input_channels, cfg.height, cfg.width}, 0.0, 1.0, rng);
}

/// Tiny balanced synthetic set sized to `cfg`.
inline Dataset tiny_dataset(const MacroConfig& cfg, std::size_t per_class, double noise, std::uint64_t seed) {
  SyntheticSpec s;
  s.num_classes = cfg.num_classes;
  s.height = cfg.height;
  s.width = cfg.width;
  s.train_counts.assign(cfg.num_classes, per_class);
  s.eval_counts.assign(cfg.num_classes, per_class);
  s.calib_counts.assign(cfg.num_classes, 1);
  s.noise = noise;
  s.seed = seed;
  return generate_synthetic(s);
}

}  // namespace fixtures
