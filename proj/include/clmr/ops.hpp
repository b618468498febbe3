#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "clmr/tensor.hpp"

namespace clmr {

enum class Padding { Same, Valid };
enum class Mode { Train, Eval };

/// Cross-correlation (no kernel flip) of an N x Cin x H x W input with a
/// Cout x Cin x k x k kernel, k odd. `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding);

/// Running statistics of one batch-norm layer.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;  // weight kept by the running estimate
  double eps = 1e-5;

  static BatchNormStats init(std::size_t channels);
};

/// Per-channel normalization followed by gamma * x_hat + shift. Train mode
/// uses batch statistics and updates `stats`; eval mode uses `stats`.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& shift, BatchNormStats& stats, Mode mode);

Tensor relu(const Tensor& input);

/// 2x2 max pooling with stride 2. Odd spatial sizes are rejected.
Tensor max_pool2x2(const Tensor& input);

/// Nearest-neighbour 2x upsampling.
Tensor upsample2x(const Tensor& input);

/// Channel concatenation, `a` first. N, H and W must agree.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Mean over all pixels of -log softmax(logits)[label]. `labels` holds one
/// class index per pixel in N x H x W order.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);

Tensor sum(const Tensor& input);
Tensor scale(const Tensor& input, double factor);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

}  // namespace clmr
