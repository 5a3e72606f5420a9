// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sevnet/network.hpp"

namespace sevnet {

struct LayerRecord {
  std::string name;
  std::string kind;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  Shape output_shape;
};

struct ComplexityReport {
  Shape input;  // single crop, N = 1
  std::vector<LayerRecord> layers;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;

  double params_millions() const { return static_cast<double>(total_params) / 1e6; }
  double gmacs() const { return static_cast<double>(total_macs) / 1e9; }

  /// Aligned text table, one row per layer in network order, then totals.
  std::string to_table() const;
  /// Structured document (JSON), one record per layer.
  std::string to_json() const;
};

/// Learnable parameters: conv/FC weights and biases plus BatchNorm scale and
/// shift. Running statistics are not counted.
std::int64_t count_params(const NetworkSpec& spec);

/// Multiply-accumulates for one crop. Conv layers contribute
/// output elements x (in_channels / groups) x kernel volume, the classifier
/// in x out; normalization, activations, pooling and dropout contribute 0.
/// `input` is C x T x H x W or 1 x C x T x H x W.
std::int64_t count_macs(const NetworkSpec& spec, const Shape& input);

ComplexityReport report(const NetworkSpec& spec, const Shape& input);

}  // namespace sevnet
