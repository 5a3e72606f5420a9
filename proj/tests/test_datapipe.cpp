// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "sevnet/datapipe.hpp"
#include "sevnet/synthetic.hpp"

using namespace sevnet;

namespace {

std::vector<double> as_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Upper 1% point of chi-square with `df` degrees of freedom (Wilson-Hilferty).
double chi2_crit_01(double df) {
  const double z = 2.3263478740408408;
  const double a = 2.0 / (9.0 * df);
  return df * std::pow(1.0 - a + z * std::sqrt(a), 3.0);
}

double chi2(const std::vector<double>& counts) {
  double n = 0;
  for (double c : counts) n += c;
  const double e = n / static_cast<double>(counts.size());
  double s = 0;
  for (double c : counts) s += (c - e) * (c - e) / e;
  return s;
}

Image make_image(std::int64_t h, std::int64_t w, auto&& value) {
  Image img;
  img.height = h;
  img.width = w;
  img.pixels.resize(static_cast<std::size_t>(3 * h * w));
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        img.pixels[(c * h + y) * w + x] = static_cast<std::uint8_t>(value(c, y, x));
  return img;
}

// Undo normalization back to the 0..255 scale.
double raw(const Tensor& t, const Normalization& n, int c, std::int64_t i) {
  return (t.data()[i] * n.std[c] + n.mean[c]) * 255.0;
}

}  // namespace

TEST_CASE("segment sampling in test mode takes segment midpoints") {
  std::mt19937_64 rng(0);
  auto p = segment_sample(160, 16, Mode::eval, rng);
  REQUIRE(p.indices.size() == 16);
  for (int i = 0; i < 16; ++i) CHECK(p.indices[i] == 5 + 10 * i);
  p = segment_sample(16, 16, Mode::eval, rng);
  for (int i = 0; i < 16; ++i) CHECK(p.indices[i] == i);
  // Short videos repeat frames but stay in range and nondecreasing.
  p = segment_sample(5, 16, Mode::train, rng);
  for (std::size_t i = 0; i < p.indices.size(); ++i) {
    CHECK(p.indices[i] >= 0);
    CHECK(p.indices[i] < 5);
    if (i) CHECK(p.indices[i] >= p.indices[i - 1]);
  }
  CHECK_THROWS_AS(segment_sample(0, 16, Mode::eval, rng), std::invalid_argument);
}

TEST_CASE("segment sampling in train mode is uniform within each segment") {
  std::mt19937_64 rng(31);
  std::vector<std::vector<double>> counts(16, std::vector<double>(10, 0.0));
  for (int d = 0; d < 100000; ++d) {
    const auto p = segment_sample(160, 16, Mode::train, rng);
    for (int s = 0; s < 16; ++s) {
      const auto off = p.indices[s] - 10 * s;
      REQUIRE(off >= 0);
      REQUIRE(off < 10);
      counts[s][off] += 1;
    }
  }
  for (int s = 0; s < 16; ++s) CHECK(chi2(counts[s]) < chi2_crit_01(9));
}

TEST_CASE("dense clips: stride, identical clips, inclusive start spacing, wrap") {
  std::mt19937_64 rng(0);
  auto plans = dense_clip_sample(64, 64, 16, Mode::eval, 10, rng);
  REQUIRE(plans.size() == 10);
  for (int k = 0; k < 16; ++k) CHECK(plans[0].indices[k] == 4 * k);
  for (const auto& p : plans) CHECK(p.indices == plans[0].indices);

  // Exhaustive enumeration of the even-spacing rule over [0, 576].
  const auto starts = dense_clip_starts(640, 64, 10);
  REQUIRE(starts.size() == 10);
  for (int j = 0; j < 10; ++j) {
    std::int64_t best = -1;
    double best_err = 1e9;
    for (std::int64_t s = 0; s <= 576; ++s) {
      const double err = std::abs(static_cast<double>(s) - 576.0 * j / 9.0);
      if (err < best_err) best_err = err, best = s;
    }
    CHECK(starts[j] == best);
  }
  CHECK(starts.front() == 0);
  CHECK(starts.back() == 576);

  // Short video: indices wrap but the plan keeps its length.
  plans = dense_clip_sample(20, 64, 16, Mode::train, 1, rng);
  REQUIRE(plans.size() == 1);
  REQUIRE(plans[0].indices.size() == 16);
  for (int k = 0; k < 16; ++k) CHECK(plans[0].indices[k] == (4 * k) % 20);

  // Train starts stay within valid positions.
  for (int d = 0; d < 1000; ++d) {
    const auto p = dense_clip_sample(100, 64, 16, Mode::train, 1, rng).front();
    CHECK(p.indices[0] <= 36);
  }
}

TEST_CASE("test-mode resize and centre crop") {
  const Normalization n;
  std::mt19937_64 rng(0);
  // 224 x 448: crop columns 112..335, no resampling since scale is 1.
  const auto img = make_image(224, 448, [](int, std::int64_t, std::int64_t x) { return x / 2; });
  auto plan = plan_crop(224, 448, 224, Mode::eval, rng);
  CHECK(plan.left == 112);
  CHECK(plan.top == 0);
  const auto t = spatial_transform({img}, plan, n);
  REQUIRE(t.shape() == Shape{3, 1, 224, 224});
  for (std::int64_t x = 0; x < 224; x += 7)
    CHECK(raw(t, n, 0, 5 * 224 + x) == doctest::Approx(static_cast<double>((x + 112) / 2)));

  // 448 x 448: the centre crop is the whole frame, each output the 2x2 mean.
  std::mt19937_64 pix(3);
  std::vector<std::uint8_t> vals(448 * 448);
  for (auto& v : vals) v = static_cast<std::uint8_t>(pix() % 256);
  const auto sq = make_image(448, 448, [&](int, std::int64_t y, std::int64_t x) {
    return vals[static_cast<std::size_t>(y * 448 + x)];
  });
  plan = plan_crop(448, 448, 224, Mode::eval, rng);
  CHECK(plan.resize_height == 224);
  CHECK(plan.top == 0);
  CHECK(plan.left == 0);
  const auto s = spatial_transform({sq}, plan, n);
  for (std::int64_t y = 0; y < 224; y += 13)
    for (std::int64_t x = 0; x < 224; x += 11) {
      double m = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) m += vals[static_cast<std::size_t>((2 * y + dy) * 448 + 2 * x + dx)];
      CHECK(raw(s, n, 1, y * 224 + x) == doctest::Approx(m / 4).epsilon(1e-9));
    }
}

TEST_CASE("train crop offsets are uniform over valid positions") {
  std::mt19937_64 rng(41);
  std::vector<double> top(33, 0.0), left(97, 0.0);
  int kept = 0;
  // Condition on the draws whose shorter side lands at 256.
  while (kept < 20000) {
    const auto p = plan_crop(256, 320, 224, Mode::train, rng, 256);
    CHECK(p.top + 224 <= p.resize_height);
    CHECK(p.left + 224 <= p.resize_width);
    if (p.resize_height != 256) continue;
    REQUIRE(p.resize_width == 320);
    top[static_cast<std::size_t>(p.top)] += 1;
    left[static_cast<std::size_t>(p.left)] += 1;
    ++kept;
  }
  CHECK(chi2(top) < chi2_crit_01(32));
  CHECK(chi2(left) < chi2_crit_01(96));
}

TEST_CASE("three crops along the longer axis") {
  const auto plans = three_crop_plans(224, 448, 224);
  CHECK(plans[0].left == 0);
  CHECK(plans[1].left == 112);
  CHECK(plans[2].left == 224);
  const auto portrait = three_crop_plans(448, 224, 224);
  CHECK(portrait[0].top == 0);
  CHECK(portrait[1].top == 112);
  CHECK(portrait[2].top == 224);

  const Normalization n;
  std::mt19937_64 pix(5);
  std::vector<std::uint8_t> vals(224 * 224);
  for (auto& v : vals) v = static_cast<std::uint8_t>(pix() % 256);
  const auto sq = make_image(224, 224, [&](int, std::int64_t y, std::int64_t x) {
    return vals[static_cast<std::size_t>(y * 224 + x)];
  });
  const auto same = three_crop({sq}, 224, n);
  CHECK(as_vec(same[0]) == as_vec(same[1]));
  CHECK(as_vec(same[1]) == as_vec(same[2]));

  const auto flat = make_image(300, 500, [](int c, std::int64_t, std::int64_t) { return 60 + 40 * c; });
  for (const auto& t : three_crop({flat, flat}, 224, n)) {
    REQUIRE(t.shape() == Shape{3, 2, 224, 224});
    for (int c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 2 * 224 * 224; i += 97)
        CHECK(t.data()[c * 2 * 224 * 224 + i] == t.data()[c * 2 * 224 * 224]);
  }
}

TEST_CASE("multi-view aggregation averages probabilities") {
  const std::vector<double> v{0.1, 0.6, 0.3};
  const auto same = multiview_aggregate({v, v, v});
  for (std::size_t k = 0; k < v.size(); ++k) CHECK(same[k] == doctest::Approx(v[k]).epsilon(1e-15));
  const auto u = multiview_aggregate({{1, 0}, {0, 1}});
  CHECK(u[0] == doctest::Approx(0.5));
  CHECK(u[1] == doctest::Approx(0.5));

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> d;
  std::vector<std::vector<double>> views(30, std::vector<double>(7));
  for (auto& view : views)
    for (auto& x : view) x = d(rng);
  const auto agg = multiview_aggregate(views);
  for (int k = 0; k < 7; ++k) {
    double s = 0;
    for (const auto& view : views) s += view[k];
    CHECK(std::abs(agg[k] - s / 30) < 1e-12);
  }
  CHECK_THROWS_AS(multiview_aggregate({}), std::invalid_argument);
}

TEST_CASE("synthetic videos are deterministic, balanced and bounds-checked") {
  SyntheticSpec spec;
  spec.train_size = 40;
  const auto a = synth_video(spec, Split::train, 7);
  const auto b = synth_video(spec, Split::train, 7);
  CHECK(a.frame_count == spec.frames_per_video);
  CHECK(a.height == 256);
  CHECK(a.width == 320);
  for (std::int64_t f : {0L, 13L, 31L}) CHECK(a.read(f).pixels == b.read(f).pixels);
  CHECK(a.read(0).pixels != synth_video(spec, Split::eval, 7).read(0).pixels);
  CHECK(a.read(0).pixels != a.read(8).pixels);

  std::map<std::int64_t, int> hist;
  for (std::int64_t i = 0; i < spec.train_size; ++i) ++hist[synth_video(spec, Split::train, i).labels.at(0)];
  CHECK(hist.size() == 8);
  for (const auto& [label, count] : hist) CHECK(count == 5);

  CHECK_THROWS_AS(synth_video(spec, Split::train, 40), std::out_of_range);
  CHECK_THROWS_AS(synth_video(spec, Split::eval, -1), std::out_of_range);
  CHECK_THROWS_AS(a.read(32), std::out_of_range);
}

TEST_CASE("dataset clips have the requested geometry and finite values") {
  DataConfig dc;
  dc.synth.train_size = 8;
  dc.synth.eval_size = 8;
  ClipDataset train(dc, Split::train, 4, 224);
  std::mt19937_64 rng(1);
  const auto t = train.train_clip(3, rng);
  CHECK(t.shape() == Shape{3, 4, 224, 224});
  for (double v : t.data()) REQUIRE(std::isfinite(v));

  dc.sampler = Sampler::dense_clip;
  dc.clip_length = 16;
  dc.num_clips = 2;
  ClipDataset eval(dc, Split::eval, 4, 64);
  const auto views = eval.eval_views(0);
  CHECK(views.size() == 6);
  for (const auto& v : views) CHECK(v.shape() == Shape{3, 4, 64, 64});
  CHECK(as_vec(eval.eval_views(0)[4]) == as_vec(views[4]));
}
