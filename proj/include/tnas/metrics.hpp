#pragma once

/// @file metrics.hpp
/// Recall metrics and computational-cost accounting.
///
/// Counting conventions:
///   params  conv kernels + per-channel biases (BN folded) + FC weights and bias
///   FLOPs   2 * MACs; a same-padded conv costs H*W*out*in*k*k MACs (padding
///           positions included), global average pooling costs C*H*W adds
///           counted as MACs, the head costs in*out MACs. Pools and ReLU are free.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tnas/error.hpp"
#include "tnas/genome.hpp"
#include "tnas/network.hpp"

namespace tnas {

/// Rows are the true class, columns the predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  static ConfusionMatrix from_predictions(std::size_t classes, std::span<const int> truth,
                                          std::span<const int> predicted) {
    if (truth.size() != predicted.size()) throw ConfigError("confusion matrix: label/prediction count mismatch");
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
    return cm;
  }

  void add(int truth, int predicted) {
    if (truth < 0 || predicted < 0 || static_cast<std::size_t>(truth) >= classes_ ||
        static_cast<std::size_t>(predicted) >= classes_) {
      throw ConfigError("confusion matrix: class index out of range");
    }
    ++counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(predicted)];
  }

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }
  std::uint64_t support(std::size_t cls) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < classes_; ++j) s += at(cls, j);
    return s;
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < classes_; ++i) s += at(i, i);
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// Weighted average recall: overall accuracy, trace / total.
inline double war(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw ConfigError("war: empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

/// Unweighted average recall over classes with non-zero support.
inline double uar(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t supported = 0;
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    const auto s = cm.support(i);
    if (s == 0) continue;
    sum += static_cast<double>(cm.at(i, i)) / static_cast<double>(s);
    ++supported;
  }
  if (supported == 0) throw ConfigError("uar: no class has support");
  return sum / static_cast<double>(supported);
}

inline double fitness(const ConfusionMatrix& cm) { return (war(cm) + uar(cm)) / 2.0; }

struct RecallScores {
  double war = 0.0;
  double uar = 0.0;
  double fitness = 0.0;
};

inline RecallScores score(const ConfusionMatrix& cm) {
  RecallScores s{war(cm), uar(cm), 0.0};
  s.fitness = (s.war + s.uar) / 2.0;
  return s;
}

// ------------------------------------------------------------------- cost

/// Parameter count of the deployed (BN-fused) network.
inline std::uint64_t param_count(const Genome& genome, const MacroConfig& cfg) {
  std::uint64_t total = 0;
  for (const auto& l : plan_layers(cfg, genome)) {
    if (l.kind == LayerKind::Conv) total += l.out_channels * l.in_channels * l.kernel * l.kernel + l.out_channels;
    if (l.kind == LayerKind::Head) total += l.in_channels * l.out_channels + l.out_channels;
  }
  return total;
}

inline std::uint64_t macs(const Genome& genome, const MacroConfig& cfg) {
  std::uint64_t total = 0;
  for (const auto& l : plan_layers(cfg, genome)) {
    switch (l.kind) {
      case LayerKind::Conv:
        total += static_cast<std::uint64_t>(l.height) * l.width * l.out_channels * l.in_channels * l.kernel * l.kernel;
        break;
      case LayerKind::GlobalAvgPool:
        total += static_cast<std::uint64_t>(l.in_channels) * l.height * l.width;
        break;
      case LayerKind::Head:
        total += static_cast<std::uint64_t>(l.in_channels) * l.out_channels;
        break;
      case LayerKind::MaxPool:
        break;
    }
  }
  return total;
}

/// FLOPs at the config's input shape (2 per MAC).
inline std::uint64_t flops(const Genome& genome, const MacroConfig& cfg) { return 2 * macs(genome, cfg); }

}  // namespace tnas
