// SPDX-License-Identifier: Apache-2.0
#include "sevnet/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace sevnet {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end)
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end)
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end)
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::array<double, 3> parse_triple(const std::string& key, const std::string& v) {
  std::array<double, 3> out{};
  std::stringstream ss(v);
  std::string item;
  int n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == 3) throw ConfigError(key + ": expected three comma-separated numbers");
    out[n++] = parse_double(key, trim(item));
  }
  if (n != 3) throw ConfigError(key + ": expected three comma-separated numbers");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

std::string fmt(const std::array<double, 3>& v) {
  return fmt(v[0]) + "," + fmt(v[1]) + "," + fmt(v[2]);
}

struct Binding {
  std::string key;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SEV_INT(KEY, FIELD, DOC)                                                 \
  Binding{KEY, DOC,                                                              \
          [](RunConfig& c, const std::string& v) { c.FIELD = parse_int(KEY, v); }, \
          [](const RunConfig& c) { return std::to_string(c.FIELD); }}
#define SEV_UINT(KEY, FIELD, DOC)                                                 \
  Binding{KEY, DOC,                                                               \
          [](RunConfig& c, const std::string& v) { c.FIELD = parse_uint(KEY, v); }, \
          [](const RunConfig& c) { return std::to_string(c.FIELD); }}
#define SEV_DOUBLE(KEY, FIELD, DOC)                                                 \
  Binding{KEY, DOC,                                                                 \
          [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(KEY, v); }, \
          [](const RunConfig& c) { return fmt(c.FIELD); }}
#define SEV_BOOL(KEY, FIELD, DOC)                                                 \
  Binding{KEY, DOC,                                                               \
          [](RunConfig& c, const std::string& v) { c.FIELD = parse_bool(KEY, v); }, \
          [](const RunConfig& c) { return fmt(c.FIELD); }}
#define SEV_TRIPLE(KEY, FIELD, DOC)                                                 \
  Binding{KEY, DOC,                                                                 \
          [](RunConfig& c, const std::string& v) { c.FIELD = parse_triple(KEY, v); }, \
          [](const RunConfig& c) { return fmt(c.FIELD); }}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      Binding{"network.variant", "block family: sev | r2plus1d | r3d",
              [](RunConfig& c, const std::string& v) {
                try {
                  c.network.variant = parse_block_kind(v);
                } catch (const std::invalid_argument& e) {
                  throw ConfigError(std::string("network.variant: ") + e.what());
                }
              },
              [](const RunConfig& c) { return std::string(to_string(c.network.variant)); }},
      SEV_INT("network.group_width", network.group_width,
              "channels per group in every grouped convolution (G)"),
      SEV_BOOL("network.se", network.se_enabled,
               "add a squeeze-and-excitation gate to every block's residual"),
      SEV_INT("network.se_reduction", network.se_reduction,
              "SE bottleneck reduction ratio"),
      SEV_INT("network.base_width", network.base_width,
              "stem output channels; 0 selects 4 x group_width"),
      SEV_INT("network.num_classes", network.num_classes, "classifier outputs"),
      SEV_DOUBLE("network.dropout", network.dropout_rate,
                 "dropout rate before the classifier, in [0, 1)"),
      SEV_INT("network.frames", network.frames, "input clip length T"),
      SEV_INT("network.height", network.height, "input height (multiple of 32)"),
      SEV_INT("network.width", network.width, "input width (multiple of 32)"),

      Binding{"data.source", "dataset source; only 'synthetic' is built in",
              [](RunConfig&, const std::string& v) {
                if (v != "synthetic")
                  throw ConfigError("data.source: unsupported source '" + v + "'");
              },
              [](const RunConfig&) { return std::string("synthetic"); }},
      Binding{"data.sampler", "temporal sampler: segment | dense_clip",
              [](RunConfig& c, const std::string& v) {
                try {
                  c.data.sampler = parse_sampler(v);
                } catch (const std::invalid_argument& e) {
                  throw ConfigError(std::string("data.sampler: ") + e.what());
                }
              },
              [](const RunConfig& c) { return std::string(to_string(c.data.sampler)); }},
      SEV_INT("data.num_classes", data.synth.num_classes,
              "synthetic motion classes (must equal network.num_classes)"),
      SEV_INT("data.video_frames", data.synth.frames_per_video,
              "frames per synthetic video"),
      SEV_INT("data.frame_height", data.synth.height, "rendered frame height"),
      SEV_INT("data.frame_width", data.synth.width, "rendered frame width"),
      SEV_INT("data.train_size", data.synth.train_size, "videos in the train split"),
      SEV_INT("data.eval_size", data.synth.eval_size, "videos in the eval split"),
      SEV_INT("data.blobs", data.synth.blobs, "moving discs per video"),
      SEV_INT("data.blob_radius", data.synth.blob_radius, "largest disc radius in pixels"),
      SEV_DOUBLE("data.speed", data.synth.speed, "disc drift in pixels per frame"),
      SEV_UINT("data.seed", data.synth.seed, "master seed of the synthetic dataset"),
      SEV_INT("data.clip_length", data.clip_length,
              "dense_clip: consecutive frames per trimmed clip"),
      SEV_INT("data.num_clips", data.num_clips, "dense_clip: clips per video at test time"),
      SEV_BOOL("data.three_crop", data.three_crop,
               "dense_clip: three spatial crops per test clip"),
      SEV_INT("data.max_short_side", data.max_short_side,
              "train resize range upper bound; 0 selects crop x 256 / 224"),
      SEV_TRIPLE("data.norm_mean", data.norm.mean, "per-channel mean after scaling to [0,1]"),
      SEV_TRIPLE("data.norm_std", data.norm.std, "per-channel std after scaling to [0,1]"),

      SEV_INT("train.epochs", train.epochs, "training epochs"),
      SEV_INT("train.warmup_epochs", train.warmup_epochs, "linear warmup epochs"),
      SEV_DOUBLE("train.base_lr", train.base_lr,
                 "learning rate per 8 samples; peak = base_lr x batch_size / 8"),
      SEV_INT("train.batch_size", train.batch_size, "effective batch size"),
      SEV_INT("train.micro_batch", train.micro_batch,
              "gradient-accumulation chunk; 0 means batch_size"),
      SEV_DOUBLE("train.momentum", train.momentum, "SGD momentum"),
      SEV_DOUBLE("train.weight_decay", train.weight_decay,
                 "L2 decay on conv and classifier weights"),
      SEV_UINT("train.seed", train.seed, "seed for initialization, shuffling and augmentation"),
      SEV_BOOL("train.eval_train", train.eval_train,
               "score the train split with the test protocol every epoch"),
      SEV_BOOL("train.class_balanced", train.class_balanced,
               "order each epoch so consecutive samples cycle through the classes"),
      SEV_BOOL("train.multi_label", train.multi_label,
               "sigmoid cross-entropy loss and mAP instead of softmax"),

      Binding{"output.dir", "directory for logs and checkpoints",
              [](RunConfig& c, const std::string& v) { c.output_dir = v; },
              [](const RunConfig& c) { return c.output_dir; }},
  };
  return table;
}

#undef SEV_INT
#undef SEV_UINT
#undef SEV_DOUBLE
#undef SEV_BOOL
#undef SEV_TRIPLE

const Binding* find_binding(const std::string& key) {
  for (const auto& b : bindings())
    if (b.key == key) return &b;
  return nullptr;
}

}  // namespace

// -- KeyValueDoc -------------------------------------------------------------

KeyValueDoc KeyValueDoc::parse(std::string_view text, const std::string& origin) {
  KeyValueDoc doc;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    const std::string key = trim(std::string_view(stripped).substr(0, eq));
    const std::string value = trim(std::string_view(stripped).substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    if (doc.has(key))
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key " + key);
    doc.entries_.emplace_back(key, value);
  }
  return doc;
}

KeyValueDoc KeyValueDoc::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void KeyValueDoc::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = value;
      return;
    }
  entries_.emplace_back(key, value);
}

std::optional<std::string> KeyValueDoc::get(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return v;
  return std::nullopt;
}

std::string KeyValueDoc::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

// -- schema ------------------------------------------------------------------

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = [] {
    std::vector<ConfigKey> out;
    const RunConfig defaults;
    for (const auto& b : bindings()) out.push_back({b.key, b.get(defaults), b.doc});
    return out;
  }();
  return schema;
}

std::string config_help() {
  std::string out = "Config keys (flat 'section.key = value' text):\n";
  for (const auto& k : config_schema()) {
    std::string line = "  " + k.key;
    line.resize(std::max<std::size_t>(line.size() + 1, 26), ' ');
    out += line + k.doc + " [default: " + k.default_value + "]\n";
  }
  return out;
}

// -- RunConfig -----------------------------------------------------------------

RunConfig RunConfig::from_doc(const KeyValueDoc& doc) {
  RunConfig c;
  for (const auto& [k, v] : doc.entries()) {
    const Binding* b = find_binding(k);
    if (!b) throw ConfigError("unknown config key '" + k + "'");
    b->set(c, v);
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  return from_doc(KeyValueDoc::load(path));
}

KeyValueDoc RunConfig::to_doc() const {
  KeyValueDoc doc;
  for (const auto& b : bindings()) doc.set(b.key, b.get(*this));
  return doc;
}

void RunConfig::validate() const {
  try {
    network.validate();
    train.validate();
    data.synth.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.synth.num_classes != network.num_classes)
    throw ConfigError("config/dataset mismatch: data.num_classes = " +
                      std::to_string(data.synth.num_classes) +
                      " but network.num_classes = " +
                      std::to_string(network.num_classes));
  if (network.height != network.width)
    throw ConfigError("network.height and network.width must match for square crops");
  if (network.height % 32 != 0)
    throw ConfigError("network.height must be a multiple of 32");
  if (data.sampler == Sampler::dense_clip && data.clip_length < network.frames)
    throw ConfigError("data.clip_length must be >= network.frames");
}

KeyValueDoc network_config_doc(const NetworkConfig& config) {
  RunConfig c;
  c.network = config;
  KeyValueDoc doc;
  for (const auto& b : bindings())
    if (b.key.rfind("network.", 0) == 0) doc.set(b.key, b.get(c));
  return doc;
}

NetworkConfig network_config_from_doc(const KeyValueDoc& doc) {
  RunConfig c;
  for (const auto& [k, v] : doc.entries()) {
    if (k.rfind("network.", 0) != 0)
      throw ConfigError("unexpected key '" + k + "' in network config");
    const Binding* b = find_binding(k);
    if (!b) throw ConfigError("unknown config key '" + k + "'");
    b->set(c, v);
  }
  return c.network;
}

}  // namespace sevnet
