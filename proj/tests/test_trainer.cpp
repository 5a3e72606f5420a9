// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "sevnet/trainer.hpp"

using namespace sevnet;

namespace {

NetworkConfig tiny_net(std::int64_t classes = 4) {
  NetworkConfig c;
  c.group_width = 1;
  c.num_classes = classes;
  c.frames = 2;
  c.height = c.width = 32;
  c.dropout_rate = 0.5;
  return c;
}

DataConfig tiny_data(std::int64_t classes = 4) {
  DataConfig d;
  d.synth.num_classes = classes;
  d.synth.train_size = 8;
  d.synth.eval_size = 4;
  d.synth.frames_per_video = 8;
  d.synth.height = 48;
  d.synth.width = 64;
  d.synth.blob_radius = 6;
  return d;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.warmup_epochs = 1;
  t.base_lr = 0.05;
  t.batch_size = 4;
  t.seed = 11;
  return t;
}

std::vector<std::vector<double>> snapshot(Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

std::vector<std::vector<double>> buffer_snapshot(Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& b : m.buffers()) out.push_back(*b.values);
  return out;
}

}  // namespace

TEST_CASE("schedule endpoints, midpoint and junction") {
  TrainConfig c;
  c.epochs = 10;
  c.warmup_epochs = 2;
  c.base_lr = 0.01;
  c.batch_size = 64;
  const auto s = LrSchedule::from_config(c, 5);
  const double B = 0.08;
  CHECK(s.peak == doctest::Approx(B).epsilon(1e-15));
  CHECK(s.warmup_steps == 10);
  CHECK(s.total_steps == 50);
  CHECK(lr_at(0, s) == doctest::Approx(B / 10));
  CHECK(lr_at(9, s) == B);   // ramp endpoint
  CHECK(lr_at(10, s) == B);  // cosine start
  CHECK(lr_at(30, s) == doctest::Approx(B / 2).epsilon(1e-12));
  CHECK(lr_at(49, s) == doctest::Approx(B * 0.5 * (1 + std::cos(M_PI * 39.0 / 40.0))));
  CHECK(lr_at(49, s) < 2e-3 * B);
  for (std::int64_t i = 11; i < 50; ++i) CHECK(lr_at(i, s) <= lr_at(i - 1, s));
  CHECK_THROWS_AS(lr_at(50, s), std::out_of_range);

  c.batch_size = 8;
  CHECK(LrSchedule::from_config(c, 1).peak == doctest::Approx(0.01));
}

TEST_CASE("sgd recurrences") {
  std::vector<double> w{1.0, -2.0}, v{0, 0};
  const std::vector<double> g{0.5, 0.25};
  sgd_step(w, g, v, 0.1, 0.0, 0.0);
  CHECK(w[0] == doctest::Approx(0.95));
  CHECK(w[1] == doctest::Approx(-2.025));

  // Constant gradient, two momentum steps: displacement lr * g * (1 + 1.9).
  std::vector<double> x{0.0}, vx{0.0};
  const std::vector<double> gx{3.0};
  sgd_step(x, gx, vx, 0.2, 0.9, 0.0);
  sgd_step(x, gx, vx, 0.2, 0.9, 0.0);
  CHECK(x[0] == doctest::Approx(-0.2 * 3.0 * 2.9));

  // Weight decay enters the velocity.
  std::vector<double> y{2.0}, vy{0.0};
  sgd_step(y, std::vector<double>{0.0}, vy, 0.5, 0.9, 0.1);
  CHECK(y[0] == doctest::Approx(2.0 - 0.5 * 0.2));

  std::vector<double> bad{1.0};
  CHECK_THROWS_AS(sgd_step(bad, g, v, 0.1, 0.9, 0.0), std::invalid_argument);
}

TEST_CASE("quadratic bowl descends monotonically and matches the scalar recurrence") {
  // f(w) = |w|^2 / 2, so g = w. Overdamped regime: real positive roots.
  std::vector<double> w{3.0, -4.0}, v{0.0, 0.0};
  double a = 5.0, va = 0.0;  // the same recurrence on the norm
  double prev = 5.0;
  for (int i = 0; i < 50; ++i) {
    const std::vector<double> g = w;
    sgd_step(w, g, v, 0.002, 0.9, 0.0);
    va = 0.9 * va + a;
    a -= 0.002 * va;
    const double n = std::hypot(w[0], w[1]);
    CHECK(n < prev);
    CHECK(n == doctest::Approx(a).epsilon(1e-12));
    prev = n;
  }
  CHECK(prev < 4.0);
}

TEST_CASE("non-finite gradient aborts naming the parameter") {
  Tensor w = Tensor::full({3}, 1.0, true);
  Tensor ok = Tensor::full({2}, 1.0, true);
  const Tensor nan = Tensor::from_data({3}, {1.0, std::numeric_limits<double>::quiet_NaN(), 0.0});
  backward(sum(mul(w, nan)));
  backward(sum(ok));
  Sgd sgd({{"ok.weight", ok, true}, {"probe.weight", w, true}}, 0.9, 1e-4);
  try {
    sgd.step(0.1);
    FAIL("expected a throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("probe.weight") != std::string::npos);
  }
  // Nothing moved.
  CHECK(ok.data()[0] == 1.0);
}

TEST_CASE("weight decay skips unflagged parameters") {
  Tensor a = Tensor::full({1}, 1.0, true), b = Tensor::full({1}, 1.0, true);
  Sgd sgd({{"a", a, true}, {"b", b, false}}, 0.0, 0.5);
  sgd.step(1.0);
  CHECK(a.data()[0] == doctest::Approx(0.5));
  CHECK(b.data()[0] == 1.0);
}

TEST_CASE("zero learning rate leaves parameters and moves only BN statistics") {
  Model m = Model::build(tiny_net(), 3);
  const ClipDataset train(tiny_data(), Split::train, 2, 32);
  auto cfg = tiny_train();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  cfg.base_lr = 0.0;
  const auto before = snapshot(m);
  const auto stats = buffer_snapshot(m);
  const auto run = fit(m, train, nullptr, cfg);
  CHECK(run.lr_trace.size() == 2);
  CHECK(snapshot(m) == before);
  CHECK(buffer_snapshot(m) != stats);
}

TEST_CASE("fit is deterministic for a fixed seed") {
  const ClipDataset train(tiny_data(), Split::train, 2, 32);
  const ClipDataset eval(tiny_data(), Split::eval, 2, 32);
  auto cfg = tiny_train();
  cfg.eval_train = true;
  Model a = Model::build(tiny_net(), 5), b = Model::build(tiny_net(), 5);
  const auto ra = fit(a, train, &eval, cfg);
  const auto rb = fit(b, train, &eval, cfg);
  CHECK(to_json(ra) == to_json(rb));
  CHECK(snapshot(a) == snapshot(b));
  CHECK(ra.lr_trace.size() == 4);
  for (const auto& e : ra.epochs) {
    REQUIRE(e.eval);
    CHECK(e.eval->top1 >= 0.0);
    CHECK(e.eval->top1 <= 1.0);
    CHECK(std::isfinite(e.train_loss));
  }

  cfg.seed = 12;
  Model c = Model::build(tiny_net(), 5);
  fit(c, train, &eval, cfg);
  CHECK(snapshot(c) != snapshot(a));
}

TEST_CASE("micro-batching keeps the step count and the full-batch special case") {
  const ClipDataset train(tiny_data(), Split::train, 2, 32);
  auto cfg = tiny_train();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  Model a = Model::build(tiny_net(), 5), b = Model::build(tiny_net(), 5),
        c = Model::build(tiny_net(), 5);
  const auto ra = fit(a, train, nullptr, cfg);
  cfg.micro_batch = 4;
  fit(b, train, nullptr, cfg);
  CHECK(snapshot(a) == snapshot(b));
  cfg.micro_batch = 2;
  const auto rc = fit(c, train, nullptr, cfg);
  CHECK(rc.lr_trace == ra.lr_trace);
  CHECK(std::isfinite(rc.epochs[0].train_loss));
  cfg.micro_batch = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("class and geometry mismatches are rejected up front") {
  Model m = Model::build(tiny_net(6), 1);
  const ClipDataset train(tiny_data(4), Split::train, 2, 32);
  CHECK_THROWS_WITH_AS(fit(m, train, nullptr, tiny_train()),
                       doctest::Contains("classes"), std::invalid_argument);
  Model ok = Model::build(tiny_net(4), 1);
  const ClipDataset wrong_frames(tiny_data(4), Split::train, 4, 32);
  CHECK_THROWS_AS(fit(ok, wrong_frames, nullptr, tiny_train()), std::invalid_argument);

  auto bad = tiny_train();
  bad.warmup_epochs = bad.epochs;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("evaluate scores a model that always predicts class 0") {
  auto d = tiny_data();
  Model m = Model::build(tiny_net(), 2);
  for (auto& v : m.fc_weight().mutable_data()) v = 0.0;
  auto bias = m.fc_bias().mutable_data();
  for (auto& v : bias) v = 0.0;
  bias[0] = 5.0;
  const ClipDataset eval(d, Split::eval, 2, 32);
  const auto r = evaluate(m, eval);
  CHECK(r.samples == 4);
  // Labels 0..3 with everything predicted 0: one right.
  CHECK(r.top1 == doctest::Approx(0.25));
  CHECK(r.mean_class_accuracy == doctest::Approx(0.25));
  CHECK(r.top5 == 1.0);
}

TEST_CASE("class-balanced epochs cycle through every class") {
  auto d = tiny_data();
  d.synth.train_size = 16;
  const ClipDataset train(d, Split::train, 2, 32);
  Model m = Model::build(tiny_net(), 1);
  auto cfg = tiny_train();
  cfg.class_balanced = true;
  Trainer t(m, train, cfg);
  for (std::int64_t epoch = 0; epoch < 3; ++epoch) {
    const auto order = t.epoch_order(epoch);
    std::vector<std::int64_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::int64_t i = 0; i < 16; ++i) CHECK(sorted[i] == i);
    for (std::size_t w = 0; w < order.size(); w += 4) {
      std::set<std::int64_t> seen;
      for (std::size_t j = w; j < w + 4; ++j) seen.insert(train.label(order[j]));
      CHECK(seen.size() == 4);
    }
    CHECK(order == t.epoch_order(epoch));
  }
  CHECK(t.epoch_order(0) != t.epoch_order(1));
}
