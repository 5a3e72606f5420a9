// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sevnet/ops.hpp"
#include "sevnet/tensor.hpp"

namespace sevnet {

enum class LayerKind { conv, batch_norm, relu, avg_pool, global_pool, sigmoid };

/// Which dataflow path of a residual block a layer sits on. Layers of one
/// branch run sequentially; `se` starts from the main branch output.
enum class Branch { main, se, shortcut };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  Branch branch = Branch::main;
  Conv3dSpec conv;              // kind == conv
  std::int64_t channels = 0;    // kind == batch_norm
  Triple pool_kernel{1, 1, 1};  // kind == avg_pool
  Triple pool_stride{1, 1, 1};
};

const char* to_string(LayerKind kind);

/// Learnable state of one layer. Only the members relevant to the kind are set.
struct LayerState {
  LayerSpec spec;
  Tensor weight;
  Tensor bias;
  BatchNorm3d bn;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;  // weight decay applies
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

/// Ordered layers with parameters; executes one branch at a time.
class LayerStack {
 public:
  LayerStack() = default;
  explicit LayerStack(std::vector<LayerSpec> specs);

  /// Fan-out scaled Gaussian conv weights, zero biases, unit BN scale.
  void init(std::mt19937_64& rng);
  Tensor run(const Tensor& x, Branch branch, Mode mode);
  bool has_branch(Branch branch) const;

  std::vector<LayerState>& layers() { return layers_; }
  const std::vector<LayerState>& layers() const { return layers_; }
  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedBuffer>& buffers);

 private:
  std::vector<LayerState> layers_;
};

enum class BlockKind { sev, r2plus1d, r3d };

const char* to_string(BlockKind kind);
BlockKind parse_block_kind(const std::string& text);

struct BlockSpec {
  BlockKind kind = BlockKind::sev;
  bool downsample = false;
  std::int64_t channels = 0;  // input channels C
  std::int64_t group_width = 1;
  bool se_enabled = false;
  std::int64_t se_reduction = 4;

  /// Bottleneck divisor of the ablation blocks: 1 (sev), 2 (r2plus1d), 2.6 (r3d).
  double middle_divisor() const;
  std::int64_t middle_channels() const;
  std::int64_t out_channels() const { return downsample ? 2 * channels : channels; }
  std::int64_t groups() const { return channels / group_width; }

  void validate() const;
  std::vector<LayerSpec> layers() const;
};

/// Residual composite: y = x + f(x) for standard blocks,
/// y = concat(f(x), shortcut(x)) for downsample blocks. f optionally
/// rescaled by a squeeze-and-excitation gate before the merge.
class Block {
 public:
  explicit Block(BlockSpec spec);

  const BlockSpec& spec() const { return spec_; }
  void init(std::mt19937_64& rng) { stack_.init(rng); }
  Tensor forward(const Tensor& x, Mode mode);

  LayerStack& stack() { return stack_; }
  const LayerStack& stack() const { return stack_; }
  LayerState& layer(const std::string& name);

 private:
  BlockSpec spec_;
  LayerStack stack_;
};

}  // namespace sevnet
