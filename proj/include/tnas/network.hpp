#pragma once

/// @file network.hpp
/// Macro backbone of the search space and the ANN forward/backward engine.
///
/// Layout for a genome with n_groups groups of blocks_per_group blocks:
///
///   stem.0 (3x3, in->C) -> stem.1 (3x3, C->C)
///   for each group g:  searchable blocks -> maxpool -> trans.g (1x1, C->2C)
///   global average pool -> head (fully connected)
///
/// A Conv-k block expands to two k x k convolutions, each followed by BN (or
/// a bias once fused) and ReLU. Skip is the identity. The chain has no
/// residual shortcuts.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tnas/adam.hpp"
#include "tnas/error.hpp"
#include "tnas/genome.hpp"
#include "tnas/nn.hpp"
#include "tnas/tensor.hpp"

namespace tnas {

struct MacroConfig {
  std::size_t n_groups = 2;
  std::size_t blocks_per_group = 2;
  std::size_t stem_out_channels = 32;
  std::size_t input_channels = 4;
  std::size_t num_classes = 7;
  std::size_t height = 32;
  std::size_t width = 32;

  std::size_t searchable_blocks() const { return n_groups * blocks_per_group; }

  void validate() const {
    if (n_groups == 0 || blocks_per_group == 0 || stem_out_channels == 0 || input_channels == 0 ||
        num_classes == 0 || height == 0 || width == 0) {
      throw ConfigError("macro config: all sizes must be positive");
    }
    if ((height >> n_groups) == 0 || (width >> n_groups) == 0) {
      throw ConfigError("macro config: input too small for " + std::to_string(n_groups) + " pooling stages");
    }
  }

  void check_genome(const Genome& g) const {
    if (g.size() != searchable_blocks()) {
      throw ConfigError("genome " + g.str() + " has " + std::to_string(g.size()) + " blocks, macro config expects " +
                        std::to_string(searchable_blocks()));
    }
  }

  friend bool operator==(const MacroConfig&, const MacroConfig&) = default;
};

enum class LayerKind { Conv, MaxPool, GlobalAvgPool, Head };

struct LayerSpec {
  LayerKind kind;
  std::string name;  // parameter key; empty for pools
  std::size_t kernel = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;  // spatial size at this layer's input
  std::size_t width = 0;
};

inline std::string block_conv_name(std::size_t group, std::size_t block, std::size_t kernel, std::size_t idx) {
  return "g" + std::to_string(group) + ".b" + std::to_string(block) + ".k" + std::to_string(kernel) + "." +
         std::to_string(idx);
}

/// Layer sequence for one genome (a pure chain).
inline std::vector<LayerSpec> plan_layers(const MacroConfig& cfg, const Genome& genome) {
  cfg.validate();
  cfg.check_genome(genome);
  std::vector<LayerSpec> plan;
  std::size_t ch = cfg.stem_out_channels, h = cfg.height, w = cfg.width;
  plan.push_back({LayerKind::Conv, "stem.0", 3, cfg.input_channels, ch, h, w});
  plan.push_back({LayerKind::Conv, "stem.1", 3, ch, ch, h, w});
  for (std::size_t g = 0; g < cfg.n_groups; ++g) {
    for (std::size_t b = 0; b < cfg.blocks_per_group; ++b) {
      const auto choice = genome.choices[g * cfg.blocks_per_group + b];
      if (choice == BlockChoice::Skip) continue;
      const std::size_t k = choice_kernel(choice);
      plan.push_back({LayerKind::Conv, block_conv_name(g, b, k, 0), k, ch, ch, h, w});
      plan.push_back({LayerKind::Conv, block_conv_name(g, b, k, 1), k, ch, ch, h, w});
    }
    plan.push_back({LayerKind::MaxPool, "", 0, ch, ch, h, w});
    h /= 2;
    w /= 2;
    plan.push_back({LayerKind::Conv, "trans." + std::to_string(g), 1, ch, 2 * ch, h, w});
    ch *= 2;
  }
  plan.push_back({LayerKind::GlobalAvgPool, "", 0, ch, ch, h, w});
  plan.push_back({LayerKind::Head, "head", 0, ch, cfg.num_classes, 1, 1});
  return plan;
}

/// Every convolution the supernet owns: stem, both candidates of every block,
/// and the transitions.
inline std::vector<LayerSpec> supernet_conv_specs(const MacroConfig& cfg) {
  cfg.validate();
  std::vector<LayerSpec> specs;
  std::size_t ch = cfg.stem_out_channels, h = cfg.height, w = cfg.width;
  specs.push_back({LayerKind::Conv, "stem.0", 3, cfg.input_channels, ch, h, w});
  specs.push_back({LayerKind::Conv, "stem.1", 3, ch, ch, h, w});
  for (std::size_t g = 0; g < cfg.n_groups; ++g) {
    for (std::size_t b = 0; b < cfg.blocks_per_group; ++b) {
      for (std::size_t k : {3u, 5u}) {
        specs.push_back({LayerKind::Conv, block_conv_name(g, b, k, 0), k, ch, ch, h, w});
        specs.push_back({LayerKind::Conv, block_conv_name(g, b, k, 1), k, ch, ch, h, w});
      }
    }
    h /= 2;
    w /= 2;
    specs.push_back({LayerKind::Conv, "trans." + std::to_string(g), 1, ch, 2 * ch, h, w});
    ch *= 2;
  }
  return specs;
}

inline std::size_t head_in_features(const MacroConfig& cfg) { return cfg.stem_out_channels << cfg.n_groups; }

/// Named parameters of a network or supernet.
struct ParameterSet {
  std::map<std::string, ConvLayerParams> convs;
  LinearParams head;

  const ConvLayerParams& conv(const std::string& name) const {
    auto it = convs.find(name);
    if (it == convs.end()) throw ConfigError("missing convolution parameters '" + name + "'");
    return it->second;
  }
  ConvLayerParams& conv(const std::string& name) {
    auto it = convs.find(name);
    if (it == convs.end()) throw ConfigError("missing convolution parameters '" + name + "'");
    return it->second;
  }

  /// Visits every tensor under a stable dotted name (sorted by layer name).
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn&& fn) {
    for (auto& [name, c] : self.convs) {
      fn(name + ".kernel", c.kernel);
      if (c.bias) fn(name + ".bias", *c.bias);
      if (c.bn) {
        fn(name + ".bn.gamma", c.bn->gamma);
        fn(name + ".bn.beta", c.bn->beta);
        fn(name + ".bn.running_mean", c.bn->running_mean);
        fn(name + ".bn.running_var", c.bn->running_var);
      }
    }
    fn(std::string("head.weight"), self.head.weight);
    fn(std::string("head.bias"), self.head.bias);
  }
  template <typename Fn>
  void visit(Fn&& fn) { visit_impl(*this, std::forward<Fn>(fn)); }
  template <typename Fn>
  void visit(Fn&& fn) const { visit_impl(*this, std::forward<Fn>(fn)); }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.convs.size() != b.convs.size()) return false;
    for (const auto& [name, c] : a.convs) {
      auto it = b.convs.find(name);
      if (it == b.convs.end()) return false;
      const auto& d = it->second;
      if (!(c.kernel == d.kernel) || c.bias.has_value() != d.bias.has_value() || c.bn.has_value() != d.bn.has_value())
        return false;
      if (c.bias && !(*c.bias == *d.bias)) return false;
      if (c.bn && !(c.bn->gamma == d.bn->gamma && c.bn->beta == d.bn->beta &&
                    c.bn->running_mean == d.bn->running_mean && c.bn->running_var == d.bn->running_var))
        return false;
    }
    return a.head.weight == b.head.weight && a.head.bias == b.head.bias;
  }
};

enum class NormMode { BatchNorm, Bias };

inline ConvLayerParams init_conv(const LayerSpec& spec, NormMode mode, Rng& rng) {
  ConvLayerParams p;
  p.kernel = kaiming_tensor({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel},
                            spec.in_channels * spec.kernel * spec.kernel, rng);
  if (mode == NormMode::BatchNorm) {
    p.bn = BatchNormParams::identity(spec.out_channels);
  } else {
    p.bias = Tensor({spec.out_channels}, 0.0);
  }
  return p;
}

inline LinearParams init_head(std::size_t in, std::size_t out, Rng& rng) {
  return {normal_tensor({out, in}, 0.0, std::sqrt(1.0 / static_cast<double>(in)), rng), Tensor({out}, 0.0)};
}

/// A single architecture in ANN form. With BN present it is the trainable
/// counterpart; once fused (or when trained BN-free) every conv carries a
/// bias and the network is a plain ReLU network.
struct Network {
  MacroConfig config;
  Genome genome;
  ParameterSet params;

  std::vector<LayerSpec> plan() const { return plan_layers(config, genome); }

  bool is_fused() const {
    for (const auto& [n, c] : params.convs) {
      if (c.bn) return false;
    }
    return true;
  }

  static Network initialize(const MacroConfig& cfg, const Genome& genome, NormMode mode, Rng& rng) {
    Network net{cfg, genome, {}};
    for (const auto& spec : plan_layers(cfg, genome)) {
      if (spec.kind == LayerKind::Conv) net.params.convs.emplace(spec.name, init_conv(spec, mode, rng));
    }
    net.params.head = init_head(head_in_features(cfg), cfg.num_classes, rng);
    return net;
  }
};

// ------------------------------------------------------------------- forward

/// Fake quantization of activations used when fine-tuning toward a
/// quantized spiking network. Entries are per weighted layer in plan order;
/// the last entry belongs to the head.
struct ActivationQuantizer {
  std::size_t steps = 16;        // number of grid values spanning [0, range]
  double input_range = 1.0;
  std::vector<double> ranges;    // decoded window length (t_max - t_min) / tau_c
  double head_offset = 0.0;

  double snap(double a, double range) const {
    if (a <= 0.0) return 0.0;
    if (a >= range) return range;
    const double step = range / static_cast<double>(steps - 1);
    return std::round(a / step) * step;
  }
};

struct LayerCache {
  Tensor input;
  Tensor output;  // post-activation output
  nn::BatchNormCache bn;
  nn::MaxPoolCache pool;
};

struct Tape {
  std::vector<LayerCache> layers;
};

struct ForwardOptions {
  bool train = false;  // batch statistics + running-stat updates
  const ActivationQuantizer* quant = nullptr;
};

/// Runs the chain on [B,C,H,W] input and returns logits [B,classes]. With a
/// tape, caches everything the backward pass needs.
inline Tensor forward(std::span<const LayerSpec> plan, ParameterSet& params, const Tensor& input,
                      const ForwardOptions& opt = {}, Tape* tape = nullptr) {
  if (tape) tape->layers.assign(plan.size(), {});
  Tensor x = input;
  if (opt.quant) {
    for (auto& v : x.storage()) v = opt.quant->snap(v, opt.quant->input_range);
  }
  std::size_t weighted = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& spec = plan[i];
    LayerCache* cache = tape ? &tape->layers[i] : nullptr;
    if (cache) cache->input = x;
    switch (spec.kind) {
      case LayerKind::Conv: {
        auto& p = params.conv(spec.name);
        Tensor z = nn::conv2d_forward(x, p.kernel, p.bias ? &*p.bias : nullptr);
        if (p.bn) z = nn::batchnorm_forward(z, *p.bn, opt.train, cache ? &cache->bn : nullptr);
        x = nn::relu_forward(z);
        if (opt.quant) {
          const double r = opt.quant->ranges.at(weighted);
          for (auto& v : x.storage()) v = opt.quant->snap(v, r);
        }
        ++weighted;
        break;
      }
      case LayerKind::MaxPool:
        x = nn::maxpool2x2_forward(x, cache ? &cache->pool : nullptr);
        break;
      case LayerKind::GlobalAvgPool:
        x = nn::global_avg_pool_forward(x);
        break;
      case LayerKind::Head:
        x = nn::linear_forward(x, params.head);
        if (opt.quant) {
          const double r = opt.quant->ranges.at(weighted);
          const double off = opt.quant->head_offset;
          for (auto& v : x.storage()) v = opt.quant->snap(v + off, r) - off;
        }
        ++weighted;
        break;
    }
    if (cache) cache->output = x;
  }
  return x;
}

/// Eval-mode forward that never mutates parameters.
inline Tensor infer(std::span<const LayerSpec> plan, const ParameterSet& params, const Tensor& input,
                    const ActivationQuantizer* quant = nullptr) {
  // forward() only mutates BN running stats in train mode
  return forward(plan, const_cast<ParameterSet&>(params), input, {false, quant}, nullptr);
}

struct ConvParamGrads {
  Tensor kernel;
  std::optional<Tensor> bias;
  std::optional<Tensor> gamma;
  std::optional<Tensor> beta;
};

struct Gradients {
  std::map<std::string, ConvParamGrads> convs;
  Tensor head_weight;
  Tensor head_bias;
  Tensor input;
};

/// Reverse pass over a taped forward. Quantizers are straight-through.
inline Gradients backward(std::span<const LayerSpec> plan, const ParameterSet& params, const Tape& tape,
                          const Tensor& grad_logits) {
  if (tape.layers.size() != plan.size()) throw ConfigError("backward: tape does not match plan");
  Gradients grads;
  Tensor g = grad_logits;
  for (std::size_t i = plan.size(); i-- > 0;) {
    const auto& spec = plan[i];
    const auto& cache = tape.layers[i];
    switch (spec.kind) {
      case LayerKind::Head: {
        auto lg = nn::linear_backward(g, cache.input, params.head);
        grads.head_weight = std::move(lg.weight);
        grads.head_bias = std::move(lg.bias);
        g = std::move(lg.input);
        break;
      }
      case LayerKind::GlobalAvgPool:
        g = nn::global_avg_pool_backward(g, cache.input.shape());
        break;
      case LayerKind::MaxPool:
        g = nn::maxpool2x2_backward(g, cache.pool);
        break;
      case LayerKind::Conv: {
        const auto& p = params.conv(spec.name);
        g = nn::relu_backward(g, cache.output);
        ConvParamGrads cg;
        if (p.bn) {
          auto bg = nn::batchnorm_backward(g, cache.bn, *p.bn);
          cg.gamma = std::move(bg.gamma);
          cg.beta = std::move(bg.beta);
          g = std::move(bg.input);
        }
        auto conv_g = nn::conv2d_backward(g, &cache.input, p.kernel, p.bias.has_value());
        cg.kernel = std::move(conv_g.kernel);
        cg.bias = std::move(conv_g.bias);
        g = std::move(conv_g.input);
        grads.convs.emplace(spec.name, std::move(cg));
        break;
      }
    }
  }
  grads.input = std::move(g);
  return grads;
}

/// Adam moments keyed by dotted tensor name.
struct OptimizerState {
  std::map<std::string, AdamState> slots;
};

/// Applies Adam to exactly the tensors present in `grads`.
inline void apply_gradients(ParameterSet& params, const Gradients& grads, OptimizerState& opt, const AdamHyper& hyper) {
  for (const auto& [name, cg] : grads.convs) {
    auto& p = params.conv(name);
    adam_step(p.kernel, cg.kernel, opt.slots[name + ".kernel"], hyper);
    if (cg.bias) adam_step(*p.bias, *cg.bias, opt.slots[name + ".bias"], hyper);
    if (cg.gamma) adam_step(p.bn->gamma, *cg.gamma, opt.slots[name + ".bn.gamma"], hyper);
    if (cg.beta) adam_step(p.bn->beta, *cg.beta, opt.slots[name + ".bn.beta"], hyper);
  }
  if (!grads.head_weight.empty()) {
    adam_step(params.head.weight, grads.head_weight, opt.slots["head.weight"], hyper);
    adam_step(params.head.bias, grads.head_bias, opt.slots["head.bias"], hyper);
  }
}

// --------------------------------------------------------------- BN fusion

/// Folds BN into the preceding convolution:
/// w' = w * gamma / sqrt(var + eps), b' = -mean * gamma / sqrt(var + eps) + beta.
inline ConvLayerParams fuse_conv_bn(const ConvLayerParams& p) {
  if (!p.bn) return p;
  ConvLayerParams f;
  f.kernel = p.kernel;
  const std::size_t out = p.out_channels();
  const std::size_t per = p.kernel.size() / out;
  Tensor bias({out});
  for (std::size_t o = 0; o < out; ++o) {
    const double scale = p.bn->gamma[o] / std::sqrt(p.bn->running_var[o] + nn::kBatchNormEps);
    for (std::size_t i = 0; i < per; ++i) f.kernel[o * per + i] *= scale;
    const double prior = p.bias ? (*p.bias)[o] : 0.0;
    bias[o] = (prior - p.bn->running_mean[o]) * scale + p.bn->beta[o];
  }
  f.bias = std::move(bias);
  return f;
}

inline Network fuse_bn(const Network& net) {
  Network out{net.config, net.genome, {}};
  for (const auto& [name, c] : net.params.convs) out.params.convs.emplace(name, fuse_conv_bn(c));
  out.params.head = net.params.head;
  return out;
}

// ------------------------------------------------------------ loss helpers

inline void require_finite_loss(double loss, const char* where) {
  if (!std::isfinite(loss)) throw NumericalError(std::string("non-finite loss in ") + where);
}

/// One optimizer step on a batch; returns the loss before the update.
inline double train_step(Network& net, std::span<const LayerSpec> plan, const Tensor& batch,
                         std::span<const int> labels, OptimizerState& opt, const AdamHyper& hyper,
                         const ActivationQuantizer* quant = nullptr,
                         const std::function<ParameterSet(const ParameterSet&)>& weight_view = {}) {
  Tape tape;
  Tensor logits;
  Gradients grads;
  if (weight_view) {
    // straight-through: forward/backward on the transformed weights, update the originals
    ParameterSet view = weight_view(net.params);
    logits = forward(plan, view, batch, {true, quant}, &tape);
    auto lg = nn::softmax_cross_entropy(logits, labels);
    require_finite_loss(lg.loss, "train_step");
    grads = backward(plan, view, tape, lg.grad_logits);
    apply_gradients(net.params, grads, opt, hyper);
    for (auto& [name, c] : net.params.convs) {
      if (c.bn) {
        c.bn->running_mean = view.conv(name).bn->running_mean;
        c.bn->running_var = view.conv(name).bn->running_var;
      }
    }
    return lg.loss;
  }
  logits = forward(plan, net.params, batch, {true, quant}, &tape);
  auto lg = nn::softmax_cross_entropy(logits, labels);
  require_finite_loss(lg.loss, "train_step");
  grads = backward(plan, net.params, tape, lg.grad_logits);
  apply_gradients(net.params, grads, opt, hyper);
  return lg.loss;
}

}  // namespace tnas
