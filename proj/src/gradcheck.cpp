// SPDX-License-Identifier: Apache-2.0
#include "sevnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "sevnet/blocks.hpp"
#include "sevnet/ops.hpp"
#include "sevnet/rng.hpp"

namespace sevnet {

namespace {

double weighted_value(const Tensor& out, const std::vector<double>& w) {
  const auto d = out.data();
  double s = 0;
  for (std::size_t i = 0; i < d.size(); ++i) s += w[i] * d[i];
  return s;
}

struct Probed {
  double value;
  std::uint64_t pattern;
};

Probed probe(const TensorFn& f, const std::vector<Tensor>& inputs,
             const std::vector<double>& w) {
  NoGradGuard no_grad;
  testing::ReluPatternProbe p;
  const Tensor out = f(inputs);
  return {weighted_value(out, w), p.hash()};
}

}  // namespace

FiniteDiffResult check_gradients(const TensorFn& f, const std::vector<Tensor>& inputs,
                                 std::mt19937_64& rng, const FiniteDiffOptions& options) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) t.node()->grad.clear();
  }
  std::uint64_t base_pattern = 0;
  std::vector<double> w;
  {
    testing::ReluPatternProbe p;
    const Tensor out = f(inputs);
    base_pattern = p.hash();
    std::normal_distribution<double> n01(0.0, 1.0);
    w.resize(static_cast<std::size_t>(out.numel()));
    for (auto& v : w) v = n01(rng);
    backward(out, w);
  }

  FiniteDiffResult result;
  for (const auto& input : inputs) {
    if (!input.requires_grad()) continue;
    const std::size_t n = static_cast<std::size_t>(input.numel());
    std::vector<double> analytic(n, 0.0);
    if (input.has_grad()) std::copy(input.grad().begin(), input.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords > 0 && n > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
    }
    Tensor leaf = input;
    for (std::size_t i : coords) {
      auto data = leaf.mutable_data();
      const double orig = data[i];
      data[i] = orig + options.step;
      const Probed plus = probe(f, inputs, w);
      data[i] = orig - options.step;
      const Probed minus = probe(f, inputs, w);
      data[i] = orig;
      if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
        ++result.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.step);
      const double a = analytic[i];
      const double scale = std::max({std::abs(a), std::abs(numeric), options.floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / scale);
      ++result.checked;
    }
  }
  for (const auto& t : inputs) {
    if (t.requires_grad()) t.node()->grad.clear();
  }
  return result;
}

GradCheckSize parse_gradcheck_size(const std::string& text) {
  if (text == "tiny") return GradCheckSize::tiny;
  if (text == "default" || text == "standard") return GradCheckSize::standard;
  throw std::invalid_argument("unknown gradcheck size '" + text + "' (tiny | default)");
}

const char* to_string(GradCheckSize size) {
  return size == GradCheckSize::tiny ? "tiny" : "default";
}

bool GradCheckReport::all_passed() const {
  return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

std::vector<std::string> GradCheckReport::failed() const {
  std::vector<std::string> out;
  for (const auto& r : results)
    if (!r.passed) out.push_back(r.name);
  return out;
}

std::string GradCheckReport::to_text() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %-6s %6s %10s %8s  %s\n", "op", "status", "cases",
                "max_rel", "coords", "worst case");
  out += line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-24s %-6s %6d %10.3e %8zu  %s\n",
                  (r.block ? "block:" + r.name : r.name).c_str(), r.passed ? "PASS" : "FAIL",
                  r.cases, r.max_rel_error, r.checked, r.worst_case.c_str());
    out += line;
  }
  return out;
}

const std::vector<std::string>& gradcheck_primitives() {
  static const std::vector<std::string> names = {
      "conv3d",  "batch_norm3d",      "relu",           "sigmoid",
      "avg_pool3d", "global_avg_pool3d", "affine",      "dropout",
      "add",     "mul",               "sum",            "flatten",
      "concat_channels", "scale_channels", "softmax_cross_entropy", "multilabel_bce"};
  return names;
}

const std::vector<std::string>& gradcheck_blocks() {
  static const std::vector<std::string> names = {"sev", "sev_downsample", "sev_se",
                                                  "sev_downsample_se", "r2plus1d", "r3d"};
  return names;
}

namespace {

struct Case {
  std::string label;
  TensorFn f;
  std::vector<Tensor> inputs;
  std::shared_ptr<void> keep_alive;  // state captured by f
  std::size_t max_coords = 0;
};

class CaseMaker {
 public:
  CaseMaker(std::mt19937_64& rng, GradCheckSize size) : rng_(rng), size_(size) {}

  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng_);
  }
  bool coin() { return between(0, 1) == 1; }
  std::int64_t extent(std::int64_t lo, std::int64_t tiny_hi, std::int64_t hi) {
    return between(lo, size_ == GradCheckSize::tiny ? tiny_hi : hi);
  }

  Tensor random(Shape shape, bool grad = true, double scale = 1.0) {
    std::normal_distribution<double> n01(0.0, scale);
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = n01(rng_);
    return Tensor::from_data(std::move(shape), std::move(v), grad);
  }

  // Values bounded away from zero so relu kinks are not straddled.
  Tensor off_zero(Shape shape) {
    std::uniform_real_distribution<double> u(0.05, 2.0);
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = coin() ? u(rng_) : -u(rng_);
    return Tensor::from_data(std::move(shape), std::move(v), true);
  }

  Shape volume(std::int64_t n_hi, std::int64_t c_hi) {
    return {extent(1, 2, n_hi), extent(1, 2, c_hi), extent(1, 2, 3), extent(1, 3, 4),
            extent(1, 3, 4)};
  }

  std::size_t coords() const { return size_ == GradCheckSize::tiny ? 24 : 0; }
  std::size_t block_coords() const { return size_ == GradCheckSize::tiny ? 24 : 160; }

  Case primitive(const std::string& op, int index);
  Case block(const std::string& name, int index);

 private:
  std::mt19937_64& rng_;
  GradCheckSize size_;
};

Case CaseMaker::primitive(const std::string& op, int index) {
  Case c;
  c.max_coords = coords();
  if (op == "conv3d") {
    const std::int64_t groups = between(1, 3);
    const std::int64_t cin = groups * between(1, 2), cout = groups * between(1, 3);
    Triple k, s, p;
    Shape in{between(1, 2), cin, 0, 0, 0};
    for (int a = 0; a < 3; ++a) {
      k[a] = between(1, 3);
      s[a] = between(1, 2);
      p[a] = between(0, k[a] / 2);
      in[2 + a] = k[a] + extent(0, 1, 3);
    }
    const bool bias = coin();
    const auto spec = Conv3dSpec::make(cin, cout, k, s, p, groups, bias);
    c.inputs = {random(in), random(spec.weight_shape(), true, 0.5)};
    if (bias) c.inputs.push_back(random({cout}));
    c.f = [spec](const std::vector<Tensor>& t) {
      return conv3d(t[0], spec, t[1], t.size() > 2 ? t[2] : Tensor{});
    };
    c.label = to_string(in) + " k" + std::to_string(k[0]) + std::to_string(k[1]) +
              std::to_string(k[2]) + " g" + std::to_string(groups);
  } else if (op == "batch_norm3d") {
    Shape in = index == 0 ? Shape{2, 3, 2, 4, 4} : volume(3, 3);
    if (numel(in) / in[1] < 2) in[0] = 2;
    auto state = std::make_shared<BatchNorm3d>(in[1]);
    state->gamma = random({in[1]}, true, 1.0);
    state->beta = random({in[1]});
    c.inputs = {random(in, true, 2.0), state->gamma, state->beta};
    c.keep_alive = state;
    c.f = [state](const std::vector<Tensor>& t) {
      return batch_norm3d(t[0], *state, Mode::train);
    };
    c.label = to_string(in);
  } else if (op == "relu" || op == "sigmoid") {
    const Shape in = volume(2, 3);
    c.inputs = {op == "relu" ? off_zero(in) : random(in, true, 2.0)};
    if (op == "relu")
      c.f = [](const std::vector<Tensor>& t) { return relu(t[0]); };
    else
      c.f = [](const std::vector<Tensor>& t) { return sigmoid(t[0]); };
    c.label = to_string(in);
  } else if (op == "avg_pool3d") {
    Triple k, s;
    Shape in{between(1, 2), between(1, 3), 0, 0, 0};
    for (int a = 0; a < 3; ++a) {
      k[a] = between(1, 2);
      s[a] = between(1, 2);
      in[2 + a] = k[a] + extent(0, 1, 3);
    }
    c.inputs = {random(in)};
    c.f = [k, s](const std::vector<Tensor>& t) { return avg_pool3d(t[0], k, s); };
    c.label = to_string(in);
  } else if (op == "global_avg_pool3d") {
    const Shape in = volume(2, 3);
    c.inputs = {random(in)};
    c.f = [](const std::vector<Tensor>& t) { return global_avg_pool3d(t[0]); };
    c.label = to_string(in);
  } else if (op == "affine") {
    const std::int64_t n = extent(1, 2, 4), ch = extent(1, 4, 8), k = extent(1, 4, 8);
    c.inputs = {random({n, ch}), random({k, ch}), random({k})};
    c.f = [](const std::vector<Tensor>& t) { return affine(t[0], t[1], t[2]); };
    c.label = to_string({n, ch}) + "->" + std::to_string(k);
  } else if (op == "dropout") {
    const Shape in = volume(2, 3);
    const double rate = std::array<double, 3>{0.0, 0.3, 0.5}[static_cast<std::size_t>(index % 3)];
    const std::uint64_t seed = rng_();
    c.inputs = {random(in)};
    c.f = [rate, seed](const std::vector<Tensor>& t) {
      std::mt19937_64 r(seed);
      return dropout(t[0], rate, Mode::train, r);
    };
    c.label = to_string(in) + " p" + std::to_string(rate).substr(0, 3);
  } else if (op == "add" || op == "mul") {
    const Shape in = volume(2, 3);
    c.inputs = {random(in), random(in)};
    if (op == "add")
      c.f = [](const std::vector<Tensor>& t) { return add(t[0], t[1]); };
    else
      c.f = [](const std::vector<Tensor>& t) { return mul(t[0], t[1]); };
    c.label = to_string(in);
  } else if (op == "sum" || op == "flatten") {
    const Shape in = volume(2, 3);
    c.inputs = {random(in)};
    if (op == "sum")
      c.f = [](const std::vector<Tensor>& t) { return sum(t[0]); };
    else
      c.f = [](const std::vector<Tensor>& t) { return flatten(t[0]); };
    c.label = to_string(in);
  } else if (op == "concat_channels") {
    Shape a = volume(2, 3), b = a;
    b[1] = between(1, 3);
    c.inputs = {random(a), random(b)};
    c.f = [](const std::vector<Tensor>& t) { return concat_channels(t[0], t[1]); };
    c.label = to_string(a) + "+" + std::to_string(b[1]);
  } else if (op == "scale_channels") {
    const Shape in = volume(2, 3);
    c.inputs = {random(in), random({in[0], in[1], 1, 1, 1})};
    c.f = [](const std::vector<Tensor>& t) { return scale_channels(t[0], t[1]); };
    c.label = to_string(in);
  } else if (op == "softmax_cross_entropy") {
    const std::int64_t n = extent(1, 3, 6), k = extent(2, 5, 10);
    std::vector<std::int64_t> targets(static_cast<std::size_t>(n));
    for (auto& y : targets) y = between(0, k - 1);
    c.inputs = {random({n, k}, true, 2.0)};
    c.f = [targets](const std::vector<Tensor>& t) { return softmax_cross_entropy(t[0], targets); };
    c.label = to_string({n, k});
  } else if (op == "multilabel_bce") {
    const std::int64_t n = extent(1, 3, 6), k = extent(1, 5, 10);
    std::vector<double> targets(static_cast<std::size_t>(n * k));
    for (auto& y : targets) y = coin() ? 1.0 : 0.0;
    c.inputs = {random({n, k}, true, 2.0)};
    c.f = [targets](const std::vector<Tensor>& t) { return multilabel_bce(t[0], targets); };
    c.label = to_string({n, k});
  } else {
    throw std::invalid_argument("gradcheck: unknown primitive " + op);
  }
  return c;
}

Case CaseMaker::block(const std::string& name, int index) {
  BlockSpec spec;
  spec.downsample = name.find("downsample") != std::string::npos;
  spec.se_enabled = name.find("_se") != std::string::npos;
  if (name == "r2plus1d") spec.kind = BlockKind::r2plus1d;
  if (name == "r3d") spec.kind = BlockKind::r3d;
  if (spec.kind != BlockKind::sev) spec.downsample = coin();

  Shape in;
  if (name == "sev" && index == 0) {
    spec.group_width = 4;
    spec.channels = 8;
    in = {1, 8, 4, 8, 8};
  } else {
    spec.group_width = std::array<std::int64_t, 3>{1, 2, 4}[static_cast<std::size_t>(between(0, 2))];
    spec.channels = spec.group_width * between(1, size_ == GradCheckSize::tiny ? 2 : 3);
    if (spec.se_enabled) spec.channels = 4 * between(1, 2);
    if (spec.kind != BlockKind::sev) spec.channels = between(3, size_ == GradCheckSize::tiny ? 4 : 6);
    in = {between(1, 2), spec.channels, extent(1, 2, 4), 2 * extent(1, 2, 3), 2 * extent(1, 2, 3)};
    if (in[0] * in[2] * in[3] * in[4] < 8) in[0] = 2, in[2] = std::max<std::int64_t>(in[2], 2);
  }
  spec.validate();

  auto block = std::make_shared<Block>(spec);
  block->init(rng_);
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;
  block->stack().collect("", params, buffers);
  // Non-trivial BN affine terms so their gradients are exercised.
  std::normal_distribution<double> jitter(0.0, 0.2);
  for (auto& p : params) {
    const bool gamma = p.name.ends_with(".gamma"), beta = p.name.ends_with(".beta");
    if (gamma || beta)
      for (auto& v : p.tensor.mutable_data()) v = (gamma ? 1.0 : 0.0) + jitter(rng_);
  }
  Case c;
  c.max_coords = block_coords();
  c.inputs.push_back(random(in));
  for (auto& p : params) c.inputs.push_back(p.tensor);
  c.keep_alive = block;
  c.f = [block](const std::vector<Tensor>& t) { return block->forward(t[0], Mode::train); };
  c.label = to_string(in) + " G" + std::to_string(spec.group_width) +
            (spec.downsample ? " down" : "");
  return c;
}

}  // namespace

GradCheckReport run_gradcheck(std::uint64_t seed, GradCheckSize size, int cases,
                              const std::function<void(const GradCheckResult&)>& progress) {
  GradCheckReport report;
  auto run = [&](const std::string& name, bool is_block) {
    std::uint64_t tag = 0xcbf29ce484222325ULL;
    for (unsigned char ch : name) tag = (tag ^ ch) * 0x100000001b3ULL;
    std::mt19937_64 rng(derive_seed(seed, {tag}));
    CaseMaker maker(rng, size);
    GradCheckResult r;
    r.name = name;
    r.block = is_block;
    for (int i = 0; i < cases; ++i) {
      Case c = is_block ? maker.block(name, i) : maker.primitive(name, i);
      FiniteDiffOptions opt;
      opt.max_coords = c.max_coords;
      const auto fd = check_gradients(c.f, c.inputs, rng, opt);
      ++r.cases;
      r.checked += fd.checked;
      r.skipped += fd.skipped;
      if (fd.max_rel_error >= r.max_rel_error) {
        r.max_rel_error = fd.max_rel_error;
        r.worst_case = c.label;
      }
    }
    r.passed = r.max_rel_error < report.tolerance && r.checked > 0;
    if (progress) progress(r);
    report.results.push_back(r);
  };
  for (const auto& op : gradcheck_primitives()) run(op, false);
  for (const auto& b : gradcheck_blocks()) run(b, true);
  return report;
}

}  // namespace sevnet
