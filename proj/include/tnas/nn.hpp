#pragma once

/// @file nn.hpp
/// Forward and backward kernels for the layer types of the search space:
/// same-padded convolution, batch normalization, ReLU, 2x2 max-pooling,
/// global average pooling, fully-connected and softmax cross-entropy.
///
/// There is no general graph. Each forward returns whatever cache its
/// backward needs and callers chain them by hand.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tnas/error.hpp"
#include "tnas/tensor.hpp"

namespace tnas {

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static BatchNormParams identity(std::size_t channels) {
    return {Tensor({channels}, 1.0), Tensor({channels}, 0.0), Tensor({channels}, 0.0),
            Tensor({channels}, 1.0)};
  }
};

/// Convolution weights plus either a batch-norm (before fusion) or an explicit
/// bias (after fusion, or when training without BN). Never both.
struct ConvLayerParams {
  Tensor kernel;  // [out, in, k, k]
  std::optional<BatchNormParams> bn;
  std::optional<Tensor> bias;  // [out]

  std::size_t out_channels() const { return kernel.dim(0); }
  std::size_t in_channels() const { return kernel.dim(1); }
  std::size_t kernel_size() const { return kernel.dim(2); }
  bool has_bias() const { return bias.has_value(); }
};

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

namespace nn {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

namespace detail {

// Unfolds one image [C,H,W] into columns [C*k*k, H*W] with zero same-padding.
inline void im2col(const double* img, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t k, double* col) {
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = img + c * height * width;
    for (std::size_t dy = 0; dy < k; ++dy) {
      for (std::size_t dx = 0; dx < k; ++dx, ++row) {
        double* dst = col + row * height * width;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - pad;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pad;
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = y + oy;
          double* out = dst + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* src = plane + sy * w;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = x + ox;
            out[x] = (sx < 0 || sx >= w) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, std::size_t channels, std::size_t height,
                       std::size_t width, std::size_t k, double* img) {
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = img + c * height * width;
    for (std::size_t dy = 0; dy < k; ++dy) {
      for (std::size_t dx = 0; dx < k; ++dx, ++row) {
        const double* src = col + row * height * width;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - pad;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pad;
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = y + oy;
          if (sy < 0 || sy >= h) continue;
          double* dst = plane + sy * w;
          const double* in = src + y * w;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = x + ox;
            if (sx >= 0 && sx < w) dst[sx] += in[x];
          }
        }
      }
    }
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(what) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                      shape_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------- convolution

/// Same-padded stride-1 cross-correlation. `bias` may be null.
inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor* bias = nullptr) {
  detail::require_rank(input, 4, "conv2d_forward input");
  detail::require_rank(kernel, 4, "conv2d_forward kernel");
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin) {
    throw ConfigError("conv2d_forward: input has " + std::to_string(cin) + " channels but kernel " +
                      shape_string(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)));
  }
  if (kernel.dim(3) != k || k % 2 == 0) {
    throw ConfigError("conv2d_forward: kernel must be square with odd size, got " +
                      shape_string(kernel.shape()));
  }
  if (bias && bias->size() != cout) throw ConfigError("conv2d_forward: bias length mismatch");

  Tensor out({batch, cout, h, w});
  const std::size_t hw = h * w, rows = cin * k * k;
  std::vector<double> col(rows * hw);
  ConstMatMap kmat(kernel.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
  for (std::size_t b = 0; b < batch; ++b) {
    const double* img = input.data() + b * cin * hw;
    MatMap omat(out.data() + b * cout * hw, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
    if (k == 1) {
      omat.noalias() = kmat * ConstMatMap(img, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(hw));
    } else {
      detail::im2col(img, cin, h, w, k, col.data());
      omat.noalias() = kmat * ConstMatMap(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
    }
    if (bias) {
      for (std::size_t o = 0; o < cout; ++o) omat.row(static_cast<Eigen::Index>(o)).array() += (*bias)[o];
    }
  }
  return out;
}

struct ConvGradients {
  Tensor input;
  Tensor kernel;
  std::optional<Tensor> bias;
};

/// Backward of conv2d_forward. `cached_input` is the tensor the forward saw.
inline ConvGradients conv2d_backward(const Tensor& grad_out, const Tensor* cached_input,
                                     const Tensor& kernel, bool with_bias = false) {
  if (cached_input == nullptr || cached_input->empty()) {
    throw ConfigError("conv2d_backward: missing forward cache");
  }
  const Tensor& input = *cached_input;
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (grad_out.shape() != Shape{batch, cout, h, w}) {
    throw ConfigError("conv2d_backward: grad_out shape " + shape_string(grad_out.shape()) +
                      " inconsistent with forward");
  }
  ConvGradients g{Tensor(input.shape()), Tensor(kernel.shape()), std::nullopt};
  const std::size_t hw = h * w, rows = cin * k * k;
  std::vector<double> col(rows * hw), gcol(rows * hw);
  ConstMatMap kmat(kernel.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
  MatMap gk(g.kernel.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
  for (std::size_t b = 0; b < batch; ++b) {
    const double* img = input.data() + b * cin * hw;
    ConstMatMap gomat(grad_out.data() + b * cout * hw, static_cast<Eigen::Index>(cout),
                      static_cast<Eigen::Index>(hw));
    double* gimg = g.input.data() + b * cin * hw;
    if (k == 1) {
      ConstMatMap imat(img, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(hw));
      gk.noalias() += gomat * imat.transpose();
      MatMap(gimg, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(hw)).noalias() =
          kmat.transpose() * gomat;
    } else {
      detail::im2col(img, cin, h, w, k, col.data());
      ConstMatMap cmat(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
      gk.noalias() += gomat * cmat.transpose();
      MatMap gc(gcol.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
      gc.noalias() = kmat.transpose() * gomat;
      detail::col2im_add(gcol.data(), cin, h, w, k, gimg);
    }
  }
  if (with_bias) {
    Tensor gb({cout});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t o = 0; o < cout; ++o) {
        const double* p = grad_out.data() + (b * cout + o) * hw;
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
        gb[o] += s;
      }
    }
    g.bias = std::move(gb);
  }
  return g;
}

// ----------------------------------------------------------------------- relu

inline Tensor relu_forward(const Tensor& x) {
  Tensor y(x);
  for (auto& v : y.storage()) v = v > 0.0 ? v : 0.0;
  return y;
}

/// `output` is the ReLU output; its sign pattern is the mask.
inline Tensor relu_backward(const Tensor& grad_out, const Tensor& output) {
  grad_out.require_same_shape(output, "relu_backward");
  Tensor g(grad_out);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(output[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

// -------------------------------------------------------------------- maxpool

struct MaxPoolCache {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2 stride-2 max pooling; odd trailing rows/cols are dropped. Ties pick
/// the lowest flat input index.
inline Tensor maxpool2x2_forward(const Tensor& x, MaxPoolCache* cache = nullptr) {
  detail::require_rank(x, 4, "maxpool2x2_forward");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ConfigError("maxpool2x2_forward: spatial size below 2");
  Tensor y({b, c, oh, ow});
  if (cache) {
    cache->input_shape = x.shape();
    cache->argmax.assign(y.size(), 0);
  }
  std::size_t o = 0;
  for (std::size_t n = 0; n < b * c; ++n) {
    const std::size_t base = n * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + (2 * i) * w + 2 * j;
        // scan in increasing flat-index order; strict > keeps the first maximum
        const std::size_t cand[3] = {base + (2 * i) * w + 2 * j + 1, base + (2 * i + 1) * w + 2 * j,
                                     base + (2 * i + 1) * w + 2 * j + 1};
        for (auto idx : cand) {
          if (x[idx] > x[best]) best = idx;
        }
        y[o] = x[best];
        if (cache) cache->argmax[o] = best;
      }
    }
  }
  return y;
}

inline Tensor maxpool2x2_backward(const Tensor& grad_out, const MaxPoolCache& cache) {
  if (cache.argmax.size() != grad_out.size()) throw ConfigError("maxpool2x2_backward: missing cache");
  Tensor g(cache.input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) g[cache.argmax[o]] += grad_out[o];
  return g;
}

// ------------------------------------------------------- global average pool

inline Tensor global_avg_pool_forward(const Tensor& x) {
  detail::require_rank(x, 4, "global_avg_pool_forward");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({b, c});
  for (std::size_t n = 0; n < b * c; ++n) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x[n * hw + i];
    y[n] = s / static_cast<double>(hw);
  }
  return y;
}

inline Tensor global_avg_pool_backward(const Tensor& grad_out, const Shape& input_shape) {
  Tensor g(input_shape);
  const std::size_t hw = input_shape[2] * input_shape[3];
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t n = 0; n < grad_out.size(); ++n) {
    for (std::size_t i = 0; i < hw; ++i) g[n * hw + i] = grad_out[n] * inv;
  }
  return g;
}

// --------------------------------------------------------------------- linear

inline Tensor linear_forward(const Tensor& x, const LinearParams& p) {
  detail::require_rank(x, 2, "linear_forward");
  const std::size_t b = x.dim(0), in = x.dim(1), out = p.weight.dim(0);
  if (p.weight.dim(1) != in) {
    throw ConfigError("linear_forward: input width " + std::to_string(in) + " vs weight " +
                      shape_string(p.weight.shape()));
  }
  Tensor y({b, out});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = p.bias[o];
      const double* wr = p.weight.data() + o * in;
      const double* xr = x.data() + n * in;
      for (std::size_t i = 0; i < in; ++i) s += wr[i] * xr[i];
      y[n * out + o] = s;
    }
  }
  return y;
}

struct LinearGradients {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

inline LinearGradients linear_backward(const Tensor& grad_out, const Tensor& x, const LinearParams& p) {
  const std::size_t b = x.dim(0), in = x.dim(1), out = p.weight.dim(0);
  LinearGradients g{Tensor(x.shape()), Tensor(p.weight.shape()), Tensor(p.bias.shape())};
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t o = 0; o < out; ++o) {
      const double go = grad_out[n * out + o];
      g.bias[o] += go;
      for (std::size_t i = 0; i < in; ++i) {
        g.weight[o * in + i] += go * x[n * in + i];
        g.input[n * in + i] += go * p.weight[o * in + i];
      }
    }
  }
  return g;
}

// ----------------------------------------------------------------- batchnorm

struct BatchNormCache {
  Tensor normalized;          // x_hat
  std::vector<double> inv_std;  // per channel
  bool train = false;
};

/// Per-channel batch normalization over [B,C,H,W]. In train mode the batch
/// statistics normalize and the running statistics are updated in place.
inline Tensor batchnorm_forward(const Tensor& x, BatchNormParams& p, bool train,
                                BatchNormCache* cache = nullptr) {
  detail::require_rank(x, 4, "batchnorm_forward");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(b * hw);
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (train) {
      double s = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* p0 = x.data() + (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p0[i];
      }
      mean = s / count;
      double ss = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const double* p0 = x.data() + (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p0[i] - mean) * (p0[i] - mean);
      }
      var = ss / count;
      const double unbiased = count > 1.0 ? ss / (count - 1.0) : var;
      p.running_mean[ch] = (1.0 - kBatchNormMomentum) * p.running_mean[ch] + kBatchNormMomentum * mean;
      p.running_var[ch] = (1.0 - kBatchNormMomentum) * p.running_var[ch] + kBatchNormMomentum * unbiased;
    } else {
      mean = p.running_mean[ch];
      var = p.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + kBatchNormEps);
    inv_std[ch] = is;
    const double g = p.gamma[ch], bt = p.beta[ch];
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t off = (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (x[off + i] - mean) * is;
        xhat[off + i] = xh;
        y[off + i] = g * xh + bt;
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->train = train;
  }
  return y;
}

/// Eval-mode forward that leaves the parameters untouched.
inline Tensor batchnorm_eval(const Tensor& x, const BatchNormParams& p) {
  BatchNormParams copy = p;
  return batchnorm_forward(x, copy, false);
}

struct BatchNormGradients {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

inline BatchNormGradients batchnorm_backward(const Tensor& grad_out, const BatchNormCache& cache,
                                             const BatchNormParams& p) {
  if (cache.normalized.empty()) throw ConfigError("batchnorm_backward: missing forward cache");
  const Tensor& xhat = cache.normalized;
  const std::size_t b = xhat.dim(0), c = xhat.dim(1), hw = xhat.dim(2) * xhat.dim(3);
  const double count = static_cast<double>(b * hw);
  BatchNormGradients g{Tensor(xhat.shape()), Tensor({c}), Tensor({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t off = (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xhat += grad_out[off + i] * xhat[off + i];
      }
    }
    g.beta[ch] = sum_dy;
    g.gamma[ch] = sum_dy_xhat;
    const double gamma = p.gamma[ch], is = cache.inv_std[ch];
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t off = (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        if (cache.train) {
          g.input[off + i] = gamma * is / count *
                             (count * grad_out[off + i] - sum_dy - xhat[off + i] * sum_dy_xhat);
        } else {
          g.input[off + i] = gamma * is * grad_out[off + i];
        }
      }
    }
  }
  return g;
}

// ------------------------------------------------------- softmax cross-entropy

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean softmax cross-entropy over the batch.
inline LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw ConfigError("softmax_cross_entropy: label count mismatch");
  LossAndGrad r{0.0, Tensor(logits.shape())};
  for (std::size_t n = 0; n < b; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                        std::to_string(c) + ")");
    }
    const double* z = logits.data() + n * c;
    double m = z[0];
    for (std::size_t i = 1; i < c; ++i) m = std::max(m, z[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < c; ++i) denom += std::exp(z[i] - m);
    const double log_denom = std::log(denom);
    r.loss += -(z[label] - m - log_denom);
    for (std::size_t i = 0; i < c; ++i) {
      const double prob = std::exp(z[i] - m - log_denom);
      r.grad_logits[n * c + i] = (prob - (static_cast<std::size_t>(label) == i ? 1.0 : 0.0)) /
                                 static_cast<double>(b);
    }
  }
  r.loss /= static_cast<double>(b);
  return r;
}

/// Row-wise argmax; ties resolve to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t n = 0; n < b; ++n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < c; ++i) {
      if (logits[n * c + i] > logits[n * c + best]) best = i;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

}  // namespace nn
}  // namespace tnas
