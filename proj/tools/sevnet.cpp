// SPDX-License-Identifier: Apache-2.0
// sevnet command-line front end: analyze, gradcheck, synth, train, eval.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sevnet/analysis.hpp"
#include "sevnet/checkpoint.hpp"
#include "sevnet/config.hpp"
#include "sevnet/gradcheck.hpp"
#include "sevnet/rng.hpp"
#include "sevnet/tensor_io.hpp"
#include "sevnet/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sevnet;

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kBreach = 3 };

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string value_text(const json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

/// Loads --config (if any), then applies key=value overrides in order.
RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValueDoc doc;
  if (!path.empty()) doc = KeyValueDoc::load(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    doc.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  return RunConfig::from_doc(doc);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = dir / ".write_probe";
  std::ofstream f(probe);
  if (ec || !f) throw RuntimeFailure("output directory " + dir.string() + " is not writable");
  f.close();
  fs::remove(probe, ec);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << text;
  if (!f) throw RuntimeFailure("write failed for " + path.string());
}

// -- analyze -------------------------------------------------------------------

struct AnalyzeArgs {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::string> variant;
  std::optional<std::int64_t> group_width, frames, size, classes;
  std::optional<bool> se;
  std::string golden;
  std::string out;
  bool json_output = false;
};

struct Expectation {
  std::string metric;
  double expected, actual, rel_tol;
  bool ok() const { return std::abs(actual - expected) <= rel_tol * std::abs(expected); }
};

int cmd_analyze(const AnalyzeArgs& a) {
  KeyValueDoc doc;
  if (!a.config.empty()) doc = KeyValueDoc::load(a.config);
  json golden;
  if (!a.golden.empty()) {
    std::ifstream g(a.golden);
    if (!g) throw ValidationError("cannot read golden file " + a.golden);
    try {
      golden = json::parse(g);
    } catch (const json::exception& e) {
      throw ValidationError("golden file " + a.golden + ": " + e.what());
    }
    if (golden.contains("network"))
      for (const auto& [k, v] : golden["network"].items()) doc.set(k, value_text(v));
  }
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    doc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.variant) doc.set("network.variant", *a.variant);
  if (a.group_width) doc.set("network.group_width", std::to_string(*a.group_width));
  if (a.frames) doc.set("network.frames", std::to_string(*a.frames));
  if (a.size) {
    doc.set("network.height", std::to_string(*a.size));
    doc.set("network.width", std::to_string(*a.size));
  }
  if (a.classes) doc.set("network.num_classes", std::to_string(*a.classes));
  if (a.se) doc.set("network.se", *a.se ? "true" : "false");

  // analyze only needs the network section; other sections are still parsed
  // so unknown keys are rejected.
  const RunConfig rc = RunConfig::from_doc(doc);
  NetworkConfig net = rc.network;
  if (!doc.has("network.num_classes")) net.num_classes = 174;
  net.validate();

  const auto spec = NetworkSpec::from_config(net);
  const auto rep = report(spec, {3, net.frames, net.height, net.width});
  std::cout << (a.json_output ? rep.to_json() + "\n" : rep.to_table());
  if (!a.out.empty()) write_file(a.out, rep.to_json() + "\n");

  if (golden.is_null()) return kOk;
  std::vector<Expectation> checks;
  const json expect = golden.value("expect", json::object());
  for (const auto& [metric, e] : expect.items()) {
    double actual = 0;
    if (metric == "params_millions")
      actual = rep.params_millions();
    else if (metric == "gmacs")
      actual = rep.gmacs();
    else if (metric == "params")
      actual = static_cast<double>(rep.total_params);
    else if (metric == "macs")
      actual = static_cast<double>(rep.total_macs);
    else
      throw ValidationError("golden file " + a.golden + ": unknown metric '" + metric + "'");
    checks.push_back({metric, e.at("value").get<double>(), actual, e.value("rel_tol", 0.0)});
  }
  bool ok = true;
  for (const auto& c : checks) {
    std::printf("golden %-16s expected %.4g  actual %.4g  tol %.1f%%  %s\n", c.metric.c_str(),
                c.expected, c.actual, 100.0 * c.rel_tol, c.ok() ? "ok" : "BREACH");
    ok = ok && c.ok();
  }
  return ok ? kOk : kBreach;
}

// -- gradcheck -----------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, const std::string& sizes, int cases,
                  const std::string& sabotage) {
  const GradCheckSize size = [&] {
    try {
      return parse_gradcheck_size(sizes);
    } catch (const std::invalid_argument& e) {
      throw ValidationError(e.what());
    }
  }();
  if (cases < 1) throw ValidationError("--cases must be >= 1");
  if (!sabotage.empty()) {
    const auto& ops = gradcheck_primitives();
    if (std::find(ops.begin(), ops.end(), sabotage) == ops.end())
      throw ValidationError("--sabotage: unknown op '" + sabotage + "'");
    testing::set_sabotaged_op(sabotage);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = run_gradcheck(seed, size, cases);
  testing::set_sabotaged_op("");
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << rep.to_text();
  const auto failed = rep.failed();
  std::printf("%zu/%zu checks passed (tolerance %.0e, %.1f s)\n",
              rep.results.size() - failed.size(), rep.results.size(), rep.tolerance, secs);
  for (const auto& f : failed) std::printf("failed: %s\n", f.c_str());
  return failed.empty() ? kOk : kBreach;
}

// -- synth ---------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::vector<std::string>& set,
              const std::string& out, const std::string& dump_dir, std::int64_t dump_count) {
  const RunConfig rc = resolve_config(spec_path, set);
  rc.data.synth.validate();
  if (dump_count < 0) throw ValidationError("--dump-count must be >= 0");
  const auto& s = rc.data.synth;

  std::string manifest = "split,index,label,seed\n";
  for (Split split : {Split::train, Split::eval})
    for (std::int64_t i = 0; i < s.split_size(split); ++i)
      manifest += std::string(to_string(split)) + "," + std::to_string(i) + "," +
                  std::to_string(s.label(split, i)) + "," +
                  std::to_string(derive_seed(s.seed, {static_cast<std::uint64_t>(split),
                                                      static_cast<std::uint64_t>(i)})) +
                  "\n";
  if (!dump_dir.empty()) ensure_dir(dump_dir);
  write_file(out, manifest);
  std::printf("wrote %lld manifest rows to %s\n",
              static_cast<long long>(s.train_size + s.eval_size), out.c_str());

  if (!dump_dir.empty()) {
    for (Split split : {Split::train, Split::eval}) {
      const ClipDataset ds(rc.data, split, rc.network.frames, rc.network.height);
      const std::int64_t n = std::min(dump_count, ds.size());
      for (std::int64_t i = 0; i < n; ++i) {
        const auto path = fs::path(dump_dir) /
                          (std::string(to_string(split)) + "_" + std::to_string(i) + ".sevt");
        save_tensor_dump(path.string(), ds.eval_views(i).front());
      }
      std::printf("dumped %lld %s clips to %s\n", static_cast<long long>(n), to_string(split),
                  dump_dir.c_str());
    }
  }
  return kOk;
}

// -- train / eval ----------------------------------------------------------------

void check_dataset_agreement(const NetworkConfig& net, const DataConfig& data) {
  if (net.num_classes != data.synth.num_classes)
    throw ValidationError("config/dataset mismatch: model has " + std::to_string(net.num_classes) +
                          " classes, dataset has " + std::to_string(data.synth.num_classes));
}

void print_eval(const char* label, const EvalMetrics& m) {
  std::printf("%s: samples %lld  top1 %.4f  top5 %.4f  mean_class_acc %.4f", label,
              static_cast<long long>(m.samples), m.top1, m.top5, m.mean_class_accuracy);
  if (m.map) std::printf("  mAP %.4f", *m.map);
  std::printf("\n");
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& set,
              const std::string& out_override) {
  RunConfig rc = resolve_config(config_path, set);
  if (!out_override.empty()) rc.output_dir = out_override;
  rc.validate();
  check_dataset_agreement(rc.network, rc.data);
  const ClipDataset train(rc.data, Split::train, rc.network.frames, rc.network.height);
  std::optional<ClipDataset> eval;
  if (rc.data.synth.eval_size > 0)
    eval.emplace(rc.data, Split::eval, rc.network.frames, rc.network.height);
  ensure_dir(rc.output_dir);
  write_file(fs::path(rc.output_dir) / "config.cfg", rc.to_doc().to_text());

  Model model = Model::build(rc.network, rc.train.seed);
  FitOptions opt;
  opt.output_dir = rc.output_dir;
  opt.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %3lld  loss %.5f  lr %.5f", static_cast<long long>(r.epoch), r.train_loss,
                r.lr);
    if (r.train_eval) std::printf("  train_top1 %.4f", r.train_eval->top1);
    if (r.eval) std::printf("  eval_top1 %.4f", r.eval->top1);
    std::printf("\n");
    std::fflush(stdout);
  };
  const auto run = fit(model, train, eval ? &*eval : nullptr, rc.train, opt);
  std::printf("best epoch %lld; checkpoints and logs in %s\n",
              static_cast<long long>(run.best_epoch), rc.output_dir.c_str());
  return kOk;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& set,
             const std::string& checkpoint, bool random_init, const std::string& split_name) {
  const RunConfig rc = resolve_config(config_path, set);
  rc.validate();
  check_dataset_agreement(rc.network, rc.data);
  Split split;
  if (split_name == "eval")
    split = Split::eval;
  else if (split_name == "train")
    split = Split::train;
  else
    throw ValidationError("--split must be train or eval");
  if (checkpoint.empty() && !random_init)
    throw ValidationError("eval needs --checkpoint (or --random-init for a fresh model)");

  std::optional<Model> model;
  if (random_init) {
    model.emplace(Model::build(rc.network, rc.train.seed));
  } else {
    if (!fs::exists(checkpoint)) throw RuntimeFailure("missing checkpoint: " + checkpoint);
    model.emplace(load_checkpoint(checkpoint));
    check_dataset_agreement(model->config(), rc.data);
    if (model->config().frames != rc.network.frames ||
        model->config().height != rc.network.height)
      std::fprintf(stderr, "note: checkpoint geometry differs from config; using config input\n");
  }
  const ClipDataset ds(rc.data, split, rc.network.frames, rc.network.height);
  if (ds.size() == 0) throw ValidationError("the selected split is empty");
  const auto m = evaluate(*model, ds, rc.train.multi_label);
  print_eval(split_name.c_str(), m);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sevnet: 3D video network analysis, gradient checking, synthetic data, training"};
  app.require_subcommand(1);
  app.footer("\n" + config_help() +
             "\nExit codes: 0 success, 1 validation error, 2 runtime failure, 3 check breach.");
  std::vector<std::string> set;

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "per-layer parameter and MAC report");
  analyze->add_option("--config", aa.config, "config file");
  analyze->add_option("--set", aa.set, "override key=value (repeatable)");
  analyze->add_option("--variant", aa.variant, "sev | r2plus1d | r3d");
  analyze->add_option("--group-width", aa.group_width, "group width G");
  analyze->add_option("--frames", aa.frames, "clip length T");
  analyze->add_option("--size", aa.size, "square input size");
  analyze->add_option("--classes", aa.classes, "number of classes (default 174)");
  analyze->add_option("--se", aa.se, "squeeze-and-excitation gate (true/false)");
  analyze->add_option("--golden", aa.golden, "JSON expectations; exit 3 on breach");
  analyze->add_option("--out", aa.out, "also write the report as JSON here");
  analyze->add_flag("--json", aa.json_output, "print JSON instead of the table");

  std::uint64_t gc_seed = 0;
  std::string gc_sizes = "default", gc_sabotage;
  int gc_cases = 20;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seed", gc_seed, "random seed");
  gradcheck->add_option("--sizes", gc_sizes, "tiny | default");
  gradcheck->add_option("--cases", gc_cases, "random shapes per op");
  gradcheck->add_option("--sabotage", gc_sabotage,
                        "test hook: perturb the named op's backward pass");

  std::string spec_path, synth_out = "manifest.csv", dump_dir;
  std::int64_t dump_count = 4;
  auto* synth = app.add_subcommand("synth", "write the synthetic dataset manifest");
  synth->add_option("--spec", spec_path, "config file with data.* keys");
  synth->add_option("--set", set, "override key=value (repeatable)");
  synth->add_option("--out", synth_out, "manifest path (CSV)");
  synth->add_option("--dump-clips", dump_dir, "directory for tensor dumps of test clips");
  synth->add_option("--dump-count", dump_count, "clips dumped per split");

  std::string config_path, out_dir, checkpoint, split = "eval";
  bool random_init = false;
  auto* train = app.add_subcommand("train", "train a model on the configured dataset");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--set", set, "override key=value (repeatable)");
  train->add_option("--out", out_dir, "output directory (overrides output.dir)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with the test protocol");
  eval->add_option("--config", config_path, "config file")->required();
  eval->add_option("--set", set, "override key=value (repeatable)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to load");
  eval->add_flag("--random-init", random_init, "evaluate a freshly initialized model instead");
  eval->add_option("--split", split, "train | eval");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    if (*analyze) return cmd_analyze(aa);
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_sizes, gc_cases, gc_sabotage);
    if (*synth) return cmd_synth(spec_path, set, synth_out, dump_dir, dump_count);
    if (*train) return cmd_train(config_path, set, out_dir);
    if (*eval) return cmd_eval(config_path, set, checkpoint, random_init, split);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const std::invalid_argument& e) {  // ConfigError and model validation
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
