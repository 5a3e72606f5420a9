// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sevnet/blocks.hpp"

namespace sevnet {

struct NetworkConfig {
  std::int64_t group_width = 8;
  BlockKind variant = BlockKind::sev;
  bool se_enabled = false;
  std::int64_t se_reduction = 4;
  std::int64_t base_width = 0;  // stem output channels; 0 means 4 * group_width
  std::int64_t num_classes = 174;
  double dropout_rate = 0.5;
  std::int64_t frames = 16;
  std::int64_t height = 224;
  std::int64_t width = 224;

  std::int64_t stem_channels() const {
    return base_width > 0 ? base_width : 4 * group_width;
  }
  void validate() const;
};

inline constexpr int kStageCount = 4;
inline constexpr int kBlocksPerStage[kStageCount] = {3, 4, 6, 3};

struct StageBlock {
  int stage;  // 2..5
  int index;  // position within the stage
  BlockSpec spec;
  std::string name() const;
};

/// Declarative layer plan: stem, 16 residual blocks in four stages, then
/// global pooling, dropout and the classifier.
struct NetworkSpec {
  NetworkConfig config;
  std::vector<LayerSpec> stem;
  std::vector<StageBlock> blocks;
  std::int64_t feature_channels = 0;

  static NetworkSpec from_config(const NetworkConfig& config);
};

/// Expected N x C x T x H x W after the stem (index 0) and after each stage
/// (indices 1..4) for the given input.
std::vector<Shape> expected_stage_shapes(const NetworkConfig& config,
                                         const Shape& input);

class Model {
 public:
  /// Builds and initializes parameters deterministically from `seed`.
  static Model build(const NetworkConfig& config, std::uint64_t seed);
  /// Builds with zero-initialized parameters (used by checkpoint loading).
  static Model uninitialized(const NetworkConfig& config);

  /// Input N x 3 x T x H x W with H and W divisible by 32. `dropout_rng` is
  /// required in train mode when the dropout rate is positive. When
  /// `stage_shapes` is given it receives the stem and stage output shapes.
  Tensor forward(const Tensor& batch, Mode mode,
                 std::mt19937_64* dropout_rng = nullptr,
                 std::vector<Shape>* stage_shapes = nullptr);

  const NetworkConfig& config() const { return spec_.config; }
  const NetworkSpec& spec() const { return spec_; }
  std::vector<Block>& blocks() { return blocks_; }
  LayerStack& stem() { return stem_; }
  Tensor& fc_weight() { return fc_weight_; }
  Tensor& fc_bias() { return fc_bias_; }

  /// Learnable tensors in network order.
  std::vector<NamedParam> parameters();
  /// BatchNorm running statistics in network order.
  std::vector<NamedBuffer> buffers();
  std::int64_t parameter_count();

  void check_input(const Shape& shape) const;

 private:
  explicit Model(NetworkSpec spec);

  NetworkSpec spec_;
  LayerStack stem_;
  std::vector<Block> blocks_;
  Tensor fc_weight_;
  Tensor fc_bias_;
};

}  // namespace sevnet
