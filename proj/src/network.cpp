// SPDX-License-Identifier: Apache-2.0
#include "sevnet/network.hpp"

#include <stdexcept>

namespace sevnet {

void NetworkConfig::validate() const {
  if (group_width < 1) throw std::invalid_argument("group width must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw std::invalid_argument("dropout rate must lie in [0, 1)");
  if (se_enabled && se_reduction < 1)
    throw std::invalid_argument("SE reduction must be >= 1");
  if (base_width < 0) throw std::invalid_argument("base width must be >= 0");
  if (frames < 1 || height < 1 || width < 1)
    throw std::invalid_argument("input extents must be positive");
  std::int64_t c = stem_channels();
  for (int s = 0; s < kStageCount; ++s, c *= 2) {
    const std::string stage = "stage" + std::to_string(s + 2);
    if (variant == BlockKind::sev && c % group_width != 0)
      throw std::invalid_argument(stage + ": entry channels " + std::to_string(c) +
                                  " not divisible by group width " +
                                  std::to_string(group_width));
    if (se_enabled && c % se_reduction != 0)
      throw std::invalid_argument(stage + ": entry channels " + std::to_string(c) +
                                  " not divisible by SE reduction " +
                                  std::to_string(se_reduction));
  }
}

std::string StageBlock::name() const {
  return "stage" + std::to_string(stage) + "." + std::to_string(index);
}

NetworkSpec NetworkSpec::from_config(const NetworkConfig& config) {
  config.validate();
  NetworkSpec spec;
  spec.config = config;
  const std::int64_t c0 = config.stem_channels();

  auto add_conv = [&](std::string name, std::int64_t cin, Triple kernel,
                      Triple stride, Triple pad) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = LayerKind::conv;
    l.conv = Conv3dSpec::make(cin, c0, kernel, stride, pad);
    spec.stem.push_back(l);
  };
  auto add_simple = [&](std::string name, LayerKind kind) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = kind;
    l.channels = kind == LayerKind::batch_norm ? c0 : 0;
    spec.stem.push_back(l);
  };
  add_conv("conv1a", 3, {1, 7, 7}, {1, 2, 2}, {0, 3, 3});
  add_simple("bn1a", LayerKind::batch_norm);
  add_simple("relu1a", LayerKind::relu);
  add_conv("conv1b", c0, {3, 1, 1}, {1, 1, 1}, {1, 0, 0});
  add_simple("bn1b", LayerKind::batch_norm);
  add_simple("relu1b", LayerKind::relu);

  std::int64_t c = c0;
  for (int s = 0; s < kStageCount; ++s) {
    for (int i = 0; i < kBlocksPerStage[s]; ++i) {
      BlockSpec b;
      b.kind = config.variant;
      b.downsample = i == 0;
      b.channels = c;
      b.group_width = config.group_width;
      b.se_enabled = config.se_enabled;
      b.se_reduction = config.se_reduction;
      try {
        b.validate();
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("stage" + std::to_string(s + 2) + ": " + e.what());
      }
      spec.blocks.push_back({s + 2, i, b});
      c = b.out_channels();
    }
  }
  spec.feature_channels = c;
  return spec;
}

std::vector<Shape> expected_stage_shapes(const NetworkConfig& config,
                                         const Shape& input) {
  const std::int64_t N = input.at(0), T = input.at(2), H = input.at(3),
                     W = input.at(4);
  std::vector<Shape> out;
  std::int64_t c = config.stem_channels();
  out.push_back({N, c, T, H / 2, W / 2});
  for (int s = 0; s < kStageCount; ++s) {
    c *= 2;
    const std::int64_t f = std::int64_t{4} << s;
    out.push_back({N, c, T, H / f, W / f});
  }
  return out;
}

Model::Model(NetworkSpec spec)
    : spec_(std::move(spec)), stem_(spec_.stem) {
  blocks_.reserve(spec_.blocks.size());
  for (const auto& b : spec_.blocks) blocks_.emplace_back(b.spec);
  fc_weight_ = Tensor::zeros({spec_.config.num_classes, spec_.feature_channels}, true);
  fc_bias_ = Tensor::zeros({spec_.config.num_classes}, true);
}

Model Model::uninitialized(const NetworkConfig& config) {
  return Model(NetworkSpec::from_config(config));
}

Model Model::build(const NetworkConfig& config, std::uint64_t seed) {
  Model m = uninitialized(config);
  std::mt19937_64 rng(seed);
  m.stem_.init(rng);
  for (auto& b : m.blocks_) b.init(rng);
  std::normal_distribution<double> fc(0.0, 0.01);
  for (auto& w : m.fc_weight_.mutable_data()) w = fc(rng);
  for (auto& b : m.fc_bias_.mutable_data()) b = 0.0;
  return m;
}

void Model::check_input(const Shape& s) const {
  if (s.size() != 5)
    throw std::invalid_argument("model input must be N x 3 x T x H x W, got " +
                                to_string(s));
  if (s[1] != 3)
    throw std::invalid_argument("model input channel axis must be 3, got " +
                                std::to_string(s[1]));
  if (s[3] % 32 != 0)
    throw std::invalid_argument("model input height " + std::to_string(s[3]) +
                                " is not divisible by 32");
  if (s[4] % 32 != 0)
    throw std::invalid_argument("model input width " + std::to_string(s[4]) +
                                " is not divisible by 32");
}

Tensor Model::forward(const Tensor& batch, Mode mode,
                      std::mt19937_64* dropout_rng,
                      std::vector<Shape>* stage_shapes) {
  check_input(batch.shape());
  Tensor h = stem_.run(batch, Branch::main, mode);
  if (stage_shapes) {
    stage_shapes->clear();
    stage_shapes->push_back(h.shape());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = blocks_[i].forward(h, mode);
    const bool stage_end = i + 1 == blocks_.size() ||
                           spec_.blocks[i + 1].stage != spec_.blocks[i].stage;
    if (stage_shapes && stage_end) stage_shapes->push_back(h.shape());
  }
  h = flatten(global_avg_pool3d(h));
  if (mode == Mode::train && spec_.config.dropout_rate > 0.0) {
    if (!dropout_rng)
      throw std::invalid_argument("train-mode forward requires a dropout rng");
    h = dropout(h, spec_.config.dropout_rate, mode, *dropout_rng);
  }
  return affine(h, fc_weight_, fc_bias_);
}

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  stem_.collect("stem.", params, buffers);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].stack().collect(spec_.blocks[i].name() + ".", params, buffers);
  params.push_back({"fc.weight", fc_weight_, true});
  params.push_back({"fc.bias", fc_bias_, false});
  return params;
}

std::vector<NamedBuffer> Model::buffers() {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  stem_.collect("stem.", params, buffers);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].stack().collect(spec_.blocks[i].name() + ".", params, buffers);
  return buffers;
}

std::int64_t Model::parameter_count() {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace sevnet
