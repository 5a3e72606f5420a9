// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "sevnet/config.hpp"

using namespace sevnet;

TEST_CASE("documents parse comments, whitespace and reject duplicates") {
  const auto doc = KeyValueDoc::parse(
      "# header\n\nnetwork.group_width = 4   \n  train.epochs=3 # trailing\n", "t.cfg");
  CHECK(doc.get("network.group_width") == "4");
  CHECK(doc.get("train.epochs") == "3");
  CHECK_FALSE(doc.has("train.seed"));
  CHECK(doc.entries().size() == 2);
  CHECK_THROWS_WITH_AS(KeyValueDoc::parse("a.b = 1\na.b = 2\n", "t.cfg"),
                       doctest::Contains("t.cfg:2"), ConfigError);
  CHECK_THROWS_AS(KeyValueDoc::parse("no equals sign\n"), ConfigError);
}

TEST_CASE("unknown keys and malformed values are rejected by name") {
  CHECK_THROWS_WITH_AS(RunConfig::from_doc(KeyValueDoc::parse("train.epoch = 3\n")),
                       doctest::Contains("train.epoch"), ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_doc(KeyValueDoc::parse("train.epochs = three\n")),
                       doctest::Contains("train.epochs"), ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_doc(KeyValueDoc::parse("network.variant = c3d\n")),
                       doctest::Contains("network.variant"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_doc(KeyValueDoc::parse("data.source = ssv2\n")), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_doc(KeyValueDoc::parse("train.eval_train = maybe\n")),
                  ConfigError);
  CHECK_THROWS_AS(RunConfig::from_doc(KeyValueDoc::parse("data.norm_mean = 0.1,0.2\n")),
                  ConfigError);
}

TEST_CASE("config round-trips through its document form") {
  auto c = RunConfig::from_doc(KeyValueDoc::parse(
      "network.variant = r3d\nnetwork.group_width = 4\nnetwork.dropout = 0.25\n"
      "data.sampler = dense_clip\ndata.clip_length = 16\ndata.speed = 2.5\n"
      "data.norm_mean = 0.5,0.4,0.3\ntrain.base_lr = 0.125\ntrain.seed = 99\n"
      "train.multi_label = true\noutput.dir = out/x\n"));
  CHECK(c.network.variant == BlockKind::r3d);
  CHECK(c.data.sampler == Sampler::dense_clip);
  CHECK(c.data.norm.mean[2] == 0.3);
  CHECK(c.output_dir == "out/x");
  const auto text = c.to_doc().to_text();
  const auto again = RunConfig::from_doc(KeyValueDoc::parse(text));
  CHECK(again.to_doc().to_text() == text);
  CHECK(again.train.base_lr == 0.125);
  CHECK(again.data.synth.speed == 2.5);
  CHECK(again.network.dropout_rate == 0.25);
}

TEST_CASE("schema and help cover every key") {
  const auto& schema = config_schema();
  const auto help = config_help();
  std::set<std::string> keys;
  for (const auto& k : schema) {
    CHECK(keys.insert(k.key).second);
    CHECK(help.find(k.key) != std::string::npos);
    CHECK_FALSE(k.doc.empty());
  }
  // The default document lists exactly the schema.
  const auto doc = RunConfig{}.to_doc();
  CHECK(doc.entries().size() == schema.size());
  for (const auto& [k, v] : doc.entries()) CHECK(keys.count(k) == 1);
  for (const char* k : {"network.group_width", "data.seed", "train.base_lr", "output.dir"})
    CHECK(keys.count(k) == 1);
}

TEST_CASE("cross-section validation") {
  auto c = RunConfig::from_doc(KeyValueDoc::parse("network.num_classes = 10\n"));
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("config/dataset mismatch"), ConfigError);
  c = RunConfig::from_doc(KeyValueDoc::parse("network.height = 48\nnetwork.width = 48\n"));
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig::from_doc(KeyValueDoc::parse("network.width = 96\n"));
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RunConfig::from_doc(KeyValueDoc::parse(
      "data.sampler = dense_clip\ndata.clip_length = 4\nnetwork.frames = 8\n"));
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(RunConfig{}.validate());
}

TEST_CASE("network-only documents") {
  NetworkConfig n;
  n.group_width = 6;
  n.se_enabled = true;
  n.num_classes = 174;
  const auto back = network_config_from_doc(network_config_doc(n));
  CHECK(back.group_width == 6);
  CHECK(back.se_enabled);
  CHECK(back.num_classes == 174);
  CHECK_THROWS_AS(network_config_from_doc(KeyValueDoc::parse("train.epochs = 1\n")), ConfigError);
}
