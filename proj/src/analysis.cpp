// SPDX-License-Identifier: Apache-2.0
#include "sevnet/analysis.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sevnet {

namespace {

std::int64_t layer_params(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv:
      return l.conv.weight_count() + (l.conv.has_bias ? l.conv.out_channels : 0);
    case LayerKind::batch_norm:
      return 2 * l.channels;
    default:
      return 0;
  }
}

// Applies one layer to a shape and records it.
Shape apply_layer(const LayerSpec& l, const Shape& in, const std::string& prefix,
                  std::vector<LayerRecord>& out) {
  Shape shape = in;
  std::int64_t macs = 0;
  switch (l.kind) {
    case LayerKind::conv:
      shape = l.conv.output_shape(in);
      macs = numel(shape) / shape[0] * (l.conv.in_channels / l.conv.groups) *
             l.conv.kernel_volume();
      break;
    case LayerKind::avg_pool:
      for (int a = 0; a < 3; ++a) {
        shape[2 + a] = window_out_extent(in[2 + a], l.pool_kernel[a],
                                         l.pool_stride[a], 0);
        if (shape[2 + a] < 1)
          throw std::invalid_argument(prefix + l.name +
                                      ": pooling window larger than input");
      }
      break;
    case LayerKind::global_pool:
      shape = {in[0], in[1], 1, 1, 1};
      break;
    default:
      break;
  }
  out.push_back({prefix + l.name, to_string(l.kind), layer_params(l), macs, shape});
  return shape;
}

Shape walk_branch(const std::vector<LayerSpec>& layers, Branch branch,
                  const Shape& in, const std::string& prefix,
                  std::vector<LayerRecord>& out) {
  Shape s = in;
  for (const auto& l : layers)
    if (l.branch == branch) s = apply_layer(l, s, prefix, out);
  return s;
}

Shape normalize_input(const Shape& input) {
  if (input.size() == 4) return {1, input[0], input[1], input[2], input[3]};
  if (input.size() == 5 && input[0] == 1) return input;
  throw std::invalid_argument("analysis input must be C x T x H x W, got " +
                              to_string(input));
}

std::string fmt_int(std::int64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(i, ",");
  return s;
}

}  // namespace

std::int64_t count_params(const NetworkSpec& spec) {
  std::int64_t n = 0;
  for (const auto& l : spec.stem) n += layer_params(l);
  for (const auto& b : spec.blocks)
    for (const auto& l : b.spec.layers()) n += layer_params(l);
  n += spec.feature_channels * spec.config.num_classes + spec.config.num_classes;
  return n;
}

std::int64_t count_macs(const NetworkSpec& spec, const Shape& input) {
  return report(spec, input).total_macs;
}

ComplexityReport report(const NetworkSpec& spec, const Shape& input) {
  ComplexityReport r;
  r.input = normalize_input(input);
  Shape s = walk_branch(spec.stem, Branch::main, r.input, "stem.", r.layers);
  for (const auto& b : spec.blocks) {
    const auto layers = b.spec.layers();
    const std::string prefix = b.name() + ".";
    if (b.spec.downsample && (s[3] % 2 != 0 || s[4] % 2 != 0))
      throw std::invalid_argument(b.name() + ": spatial extent " + to_string(s) +
                                  " is not even");
    Shape main = walk_branch(layers, Branch::main, s, prefix, r.layers);
    if (b.spec.se_enabled) walk_branch(layers, Branch::se, main, prefix, r.layers);
    if (b.spec.downsample) {
      Shape shortcut = walk_branch(layers, Branch::shortcut, s, prefix, r.layers);
      main[1] += shortcut[1];
    }
    s = main;
  }
  const std::int64_t C = s[1], K = spec.config.num_classes;
  r.layers.push_back({"pool", "global_pool", 0, 0, {1, C, 1, 1, 1}});
  r.layers.push_back({"dropout", "dropout", 0, 0, {1, C}});
  r.layers.push_back({"fc", "fc", C * K + K, C * K, {1, K}});
  for (const auto& l : r.layers) {
    r.total_params += l.params;
    r.total_macs += l.macs;
  }
  return r;
}

std::string ComplexityReport::to_table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %-12s %14s %18s  %s\n", "layer", "kind",
                "params", "macs", "output");
  os << line;
  for (const auto& l : layers) {
    std::snprintf(line, sizeof line, "%-28s %-12s %14s %18s  %s\n", l.name.c_str(),
                  l.kind.c_str(), fmt_int(l.params).c_str(),
                  fmt_int(l.macs).c_str(), to_string(l.output_shape).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "%-28s %-12s %14s %18s\n", "total", "",
                fmt_int(total_params).c_str(), fmt_int(total_macs).c_str());
  os << line;
  std::snprintf(line, sizeof line, "params: %.3f M   MACs: %.3f G   input: %s\n",
                params_millions(), gmacs(), to_string(input).c_str());
  os << line;
  return os.str();
}

std::string ComplexityReport::to_json() const {
  nlohmann::json doc;
  doc["input"] = input;
  doc["total_params"] = total_params;
  doc["total_macs"] = total_macs;
  doc["params_millions"] = params_millions();
  doc["gmacs"] = gmacs();
  auto& arr = doc["layers"] = nlohmann::json::array();
  for (const auto& l : layers)
    arr.push_back({{"name", l.name},
                   {"kind", l.kind},
                   {"params", l.params},
                   {"macs", l.macs},
                   {"output", l.output_shape}});
  return doc.dump(1);
}

}  // namespace sevnet
