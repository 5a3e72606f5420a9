// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sevnet/network.hpp"
#include "sevnet/synthetic.hpp"
#include "sevnet/trainer.hpp"

namespace sevnet {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Flat `section.key = value` document. Blank lines and `#` comments are
/// ignored; keys keep their first-seen order; duplicates are rejected.
class KeyValueDoc {
 public:
  static KeyValueDoc parse(std::string_view text, const std::string& origin = "<config>");
  static KeyValueDoc load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& key) const;
  bool has(const std::string& key) const { return get(key).has_value(); }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::string to_text() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string doc;
};

/// Every accepted key with its default and description.
const std::vector<ConfigKey>& config_schema();
/// Human-readable listing of the schema for --help.
std::string config_help();

struct RunConfig {
  // Class count defaults to the synthetic dataset's.
  NetworkConfig network = [] {
    NetworkConfig n;
    n.num_classes = 8;
    return n;
  }();
  DataConfig data;
  TrainConfig train;
  std::string output_dir = "runs/default";

  /// Applies defaults, then the document. Unknown keys or malformed values
  /// throw ConfigError naming the key.
  static RunConfig from_doc(const KeyValueDoc& doc);
  static RunConfig load(const std::string& path);
  KeyValueDoc to_doc() const;
  /// Cross-section consistency (class counts, clip geometry).
  void validate() const;
};

/// `network.*` keys only; used by checkpoints.
KeyValueDoc network_config_doc(const NetworkConfig& config);
NetworkConfig network_config_from_doc(const KeyValueDoc& doc);

}  // namespace sevnet
