// SPDX-License-Identifier: Apache-2.0
#include "sevnet/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace sevnet {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::global_pool: return "global_pool";
    case LayerKind::sigmoid: return "sigmoid";
  }
  return "?";
}

const char* to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::sev: return "sev";
    case BlockKind::r2plus1d: return "r2plus1d";
    case BlockKind::r3d: return "r3d";
  }
  return "?";
}

BlockKind parse_block_kind(const std::string& text) {
  if (text == "sev") return BlockKind::sev;
  if (text == "r2plus1d") return BlockKind::r2plus1d;
  if (text == "r3d") return BlockKind::r3d;
  throw std::invalid_argument("unknown block variant '" + text +
                              "' (expected sev, r2plus1d or r3d)");
}

// -- LayerStack ------------------------------------------------------------

LayerStack::LayerStack(std::vector<LayerSpec> specs) {
  layers_.reserve(specs.size());
  for (auto& s : specs) {
    LayerState st;
    st.spec = std::move(s);
    if (st.spec.kind == LayerKind::conv) {
      st.spec.conv.validate();
      st.weight = Tensor::zeros(st.spec.conv.weight_shape(), true);
      if (st.spec.conv.has_bias)
        st.bias = Tensor::zeros({st.spec.conv.out_channels}, true);
    } else if (st.spec.kind == LayerKind::batch_norm) {
      st.bn = BatchNorm3d(st.spec.channels);
    }
    layers_.push_back(std::move(st));
  }
}

void LayerStack::init(std::mt19937_64& rng) {
  for (auto& l : layers_) {
    if (l.spec.kind == LayerKind::conv) {
      const auto& c = l.spec.conv;
      const double fan_out =
          static_cast<double>(c.out_channels / c.groups * c.kernel_volume());
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_out));
      for (auto& w : l.weight.mutable_data()) w = dist(rng);
      if (l.bias.defined())
        for (auto& b : l.bias.mutable_data()) b = 0.0;
    } else if (l.spec.kind == LayerKind::batch_norm) {
      l.bn = BatchNorm3d(l.spec.channels);
    }
  }
}

bool LayerStack::has_branch(Branch branch) const {
  for (const auto& l : layers_)
    if (l.spec.branch == branch) return true;
  return false;
}

Tensor LayerStack::run(const Tensor& x, Branch branch, Mode mode) {
  Tensor h = x;
  for (auto& l : layers_) {
    if (l.spec.branch != branch) continue;
    switch (l.spec.kind) {
      case LayerKind::conv: h = conv3d(h, l.spec.conv, l.weight, l.bias); break;
      case LayerKind::batch_norm: h = batch_norm3d(h, l.bn, mode); break;
      case LayerKind::relu: h = relu(h); break;
      case LayerKind::sigmoid: h = sigmoid(h); break;
      case LayerKind::avg_pool:
        h = avg_pool3d(h, l.spec.pool_kernel, l.spec.pool_stride);
        break;
      case LayerKind::global_pool: h = global_avg_pool3d(h); break;
    }
  }
  return h;
}

void LayerStack::collect(const std::string& prefix,
                         std::vector<NamedParam>& params,
                         std::vector<NamedBuffer>& buffers) {
  for (auto& l : layers_) {
    const std::string base = prefix + l.spec.name;
    if (l.spec.kind == LayerKind::conv) {
      params.push_back({base + ".weight", l.weight, true});
      if (l.bias.defined()) params.push_back({base + ".bias", l.bias, false});
    } else if (l.spec.kind == LayerKind::batch_norm) {
      params.push_back({base + ".gamma", l.bn.gamma, false});
      params.push_back({base + ".beta", l.bn.beta, false});
      buffers.push_back({base + ".running_mean", &l.bn.running_mean});
      buffers.push_back({base + ".running_var", &l.bn.running_var});
    }
  }
}

// -- BlockSpec -------------------------------------------------------------

double BlockSpec::middle_divisor() const {
  switch (kind) {
    case BlockKind::sev: return 1.0;
    case BlockKind::r2plus1d: return 2.0;
    case BlockKind::r3d: return 2.6;
  }
  return 1.0;
}

std::int64_t BlockSpec::middle_channels() const {
  return static_cast<std::int64_t>(
      std::llround(static_cast<double>(channels) / middle_divisor()));
}

void BlockSpec::validate() const {
  if (channels < 1) throw std::invalid_argument("block: channels must be positive");
  if (group_width < 1)
    throw std::invalid_argument("block: group width must be positive");
  if (kind == BlockKind::sev && channels % group_width != 0)
    throw std::invalid_argument("block: channels " + std::to_string(channels) +
                                " not divisible by group width " +
                                std::to_string(group_width));
  if (middle_channels() < 1)
    throw std::invalid_argument("block: middle width rounds to zero for " +
                                std::to_string(channels) + " channels");
  if (se_enabled && (se_reduction < 1 || channels % se_reduction != 0))
    throw std::invalid_argument("block: channels " + std::to_string(channels) +
                                " not divisible by SE reduction " +
                                std::to_string(se_reduction));
}

namespace {

LayerSpec conv_layer(std::string name, Branch branch, std::int64_t cin,
                     std::int64_t cout, Triple kernel, Triple stride,
                     std::int64_t groups, bool bias = false) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::conv;
  l.branch = branch;
  // "same" padding: floor(k / 2) per axis.
  l.conv = Conv3dSpec::make(cin, cout, kernel, stride,
                            {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2},
                            groups, bias);
  return l;
}

LayerSpec simple_layer(std::string name, Branch branch, LayerKind kind,
                       std::int64_t channels = 0) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = kind;
  l.branch = branch;
  l.channels = channels;
  return l;
}

void conv_bn_relu(std::vector<LayerSpec>& out, const std::string& suffix,
                  Branch branch, std::int64_t cin, std::int64_t cout,
                  Triple kernel, Triple stride, std::int64_t groups) {
  out.push_back(conv_layer("conv" + suffix, branch, cin, cout, kernel, stride, groups));
  out.push_back(simple_layer("bn" + suffix, branch, LayerKind::batch_norm, cout));
  out.push_back(simple_layer("relu" + suffix, branch, LayerKind::relu));
}

}  // namespace

std::vector<LayerSpec> BlockSpec::layers() const {
  validate();
  const std::int64_t C = channels;
  const std::int64_t m = middle_channels();
  const std::int64_t s = downsample ? 2 : 1;
  std::vector<LayerSpec> out;
  switch (kind) {
    case BlockKind::sev:
      conv_bn_relu(out, "1", Branch::main, C, C, {1, 1, 1}, {1, 1, 1}, 1);
      conv_bn_relu(out, "2", Branch::main, C, C, {1, 3, 3}, {1, s, s}, groups());
      conv_bn_relu(out, "3", Branch::main, C, C, {3, 1, 1}, {1, 1, 1}, 1);
      break;
    case BlockKind::r2plus1d:
      conv_bn_relu(out, "1", Branch::main, C, m, {1, 1, 1}, {1, 1, 1}, 1);
      conv_bn_relu(out, "2", Branch::main, m, m, {1, 3, 3}, {1, s, s}, 1);
      conv_bn_relu(out, "3", Branch::main, m, C, {3, 1, 1}, {1, 1, 1}, 1);
      break;
    case BlockKind::r3d:
      conv_bn_relu(out, "1", Branch::main, C, m, {1, 1, 1}, {1, 1, 1}, 1);
      conv_bn_relu(out, "2", Branch::main, m, m, {3, 3, 3}, {1, s, s}, 1);
      conv_bn_relu(out, "3", Branch::main, m, C, {1, 1, 1}, {1, 1, 1}, 1);
      break;
  }
  if (se_enabled) {
    const std::int64_t r = C / se_reduction;
    out.push_back(simple_layer("se_pool", Branch::se, LayerKind::global_pool));
    out.push_back(conv_layer("se_fc1", Branch::se, C, r, {1, 1, 1}, {1, 1, 1}, 1, true));
    out.push_back(simple_layer("se_relu", Branch::se, LayerKind::relu));
    out.push_back(conv_layer("se_fc2", Branch::se, r, C, {1, 1, 1}, {1, 1, 1}, 1, true));
    out.push_back(simple_layer("se_gate", Branch::se, LayerKind::sigmoid));
  }
  if (downsample) {
    LayerSpec pool = simple_layer("short_pool", Branch::shortcut, LayerKind::avg_pool);
    pool.pool_kernel = {1, 2, 2};
    pool.pool_stride = {1, 2, 2};
    out.push_back(pool);
    conv_bn_relu(out, "_short", Branch::shortcut, C, C, {1, 1, 1}, {1, 1, 1}, 1);
  }
  return out;
}

// -- Block -----------------------------------------------------------------

Block::Block(BlockSpec spec) : spec_(spec), stack_(spec.layers()) {}

LayerState& Block::layer(const std::string& name) {
  for (auto& l : stack_.layers())
    if (l.spec.name == name) return l;
  throw std::out_of_range("block has no layer '" + name + "'");
}

Tensor Block::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 5 || x.dim(1) != spec_.channels)
    throw std::invalid_argument("block: expected N x " +
                                std::to_string(spec_.channels) +
                                " x T x H x W input, got " + to_string(x.shape()));
  if (spec_.downsample && (x.dim(3) % 2 != 0 || x.dim(4) % 2 != 0))
    throw std::invalid_argument("downsample block: spatial extent " +
                                std::to_string(x.dim(3)) + "x" +
                                std::to_string(x.dim(4)) + " is not even");
  Tensor residual = stack_.run(x, Branch::main, mode);
  if (spec_.se_enabled)
    residual = scale_channels(residual, stack_.run(residual, Branch::se, mode));
  if (spec_.downsample)
    return concat_channels(residual, stack_.run(x, Branch::shortcut, mode));
  return add(x, residual);
}

}  // namespace sevnet
