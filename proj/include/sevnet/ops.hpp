// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sevnet/tensor.hpp"

namespace sevnet {

using Triple = std::array<std::int64_t, 3>;  // (t, h, w)

/// Output extent of a sliding window along one axis.
std::int64_t window_out_extent(std::int64_t in, std::int64_t kernel,
                               std::int64_t stride, std::int64_t pad);

/// Geometry of a (possibly grouped) 3D convolution. Validated on creation.
struct Conv3dSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  std::int64_t groups = 1;
  bool has_bias = false;

  static Conv3dSpec make(std::int64_t in_channels, std::int64_t out_channels,
                         Triple kernel, Triple stride = {1, 1, 1},
                         Triple padding = {0, 0, 0}, std::int64_t groups = 1,
                         bool has_bias = false);

  void validate() const;
  Shape weight_shape() const;
  std::int64_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  std::int64_t weight_count() const;
  /// Output shape for an N x C x T x H x W input; throws naming the axis.
  Shape output_shape(const Shape& input) const;
};

/// Per-channel affine normalization with running statistics.
struct BatchNorm3d {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit BatchNorm3d(std::int64_t channels = 0);
  std::int64_t channels() const {
    return static_cast<std::int64_t>(running_mean.size());
  }
};

enum class PoolKind { average, global_average };

// -- primitives ----------------------------------------------------------

Tensor conv3d(const Tensor& input, const Conv3dSpec& spec, const Tensor& weight,
              const Tensor& bias = {});

/// Training mode normalizes with batch statistics over (N, T, H, W) and
/// updates the running estimates; eval mode uses the running estimates.
Tensor batch_norm3d(const Tensor& input, BatchNorm3d& state, Mode mode);

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);

Tensor avg_pool3d(const Tensor& input, Triple kernel, Triple stride);
/// Reduces T, H, W to 1 x 1 x 1.
Tensor global_avg_pool3d(const Tensor& input);
Tensor pool3d(PoolKind kind, const Tensor& input, Triple kernel = {1, 1, 1},
              Triple stride = {1, 1, 1});

/// y = x W^T + b for x: N x C, W: K x C, b: K.
Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Inverted dropout; identity when rate == 0 or in eval mode.
Tensor dropout(const Tensor& input, double rate, Mode mode,
               std::mt19937_64& rng);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& input);
/// Flattens N x C x 1 x 1 x 1 (or any N x ...) to N x rest.
Tensor flatten(const Tensor& input);
/// Channel-wise concatenation of two N x C x T x H x W tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// x[n, c, ...] * scale[n, c, 0, 0, 0].
Tensor scale_channels(const Tensor& input, const Tensor& scale);

/// Mean softmax cross-entropy over the batch; targets are class indices.
Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::int64_t> targets);
/// Mean over batch and classes of per-class sigmoid cross-entropy;
/// targets is N x K of 0/1.
Tensor multilabel_bce(const Tensor& logits, std::span<const double> targets);

/// Row-wise numerically stable softmax (no graph).
std::vector<double> softmax_rows(std::span<const double> logits,
                                 std::int64_t rows, std::int64_t cols);

// -- instrumentation -----------------------------------------------------

/// Counts the multiplications executed by forward conv/affine kernels on
/// this thread while alive.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  MacCounter* previous_;
  friend void detail_add_macs(std::uint64_t);
};

void detail_add_macs(std::uint64_t n);

namespace testing {
/// Negative-control hook for the gradient checker: the named op's backward
/// pass scales its input gradient by 1.01. Empty string disables.
void set_sabotaged_op(std::string op);
const std::string& sabotaged_op();

/// Hashes the active/inactive pattern of every relu evaluated on this thread
/// while alive. Finite-difference checks use it to detect kink crossings.
class ReluPatternProbe {
 public:
  ReluPatternProbe();
  ~ReluPatternProbe();
  ReluPatternProbe(const ReluPatternProbe&) = delete;
  ReluPatternProbe& operator=(const ReluPatternProbe&) = delete;
  std::uint64_t hash() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  std::uint64_t* previous_;
};
}  // namespace testing

}  // namespace sevnet
