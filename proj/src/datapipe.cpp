// SPDX-License-Identifier: Apache-2.0
#include "sevnet/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sevnet {

Image VideoRecord::read(std::int64_t index) const {
  if (index < 0 || index >= frame_count)
    throw std::out_of_range("video " + id + ": frame " + std::to_string(index) +
                            " outside [0, " + std::to_string(frame_count) + ")");
  return frame(index);
}

const char* to_string(Sampler s) {
  return s == Sampler::segment ? "segment" : "dense_clip";
}

Sampler parse_sampler(const std::string& text) {
  if (text == "segment") return Sampler::segment;
  if (text == "dense_clip") return Sampler::dense_clip;
  throw std::invalid_argument("unknown sampler '" + text +
                              "' (expected segment or dense_clip)");
}

ClipIndexPlan segment_sample(std::int64_t frame_count, std::int64_t num_segments,
                             Mode mode, std::mt19937_64& rng) {
  if (frame_count < 1) throw std::invalid_argument("segment_sample: video has no frames");
  if (num_segments < 1)
    throw std::invalid_argument("segment_sample: num_segments must be positive");
  ClipIndexPlan plan;
  plan.indices.reserve(num_segments);
  for (std::int64_t i = 0; i < num_segments; ++i) {
    std::int64_t idx;
    if (mode == Mode::eval) {
      // floor((i + 1/2) * N / S) in exact integer arithmetic.
      idx = (2 * i + 1) * frame_count / (2 * num_segments);
    } else {
      const std::int64_t lo = i * frame_count / num_segments;
      const std::int64_t hi = (i + 1) * frame_count / num_segments;
      if (hi > lo) {
        std::uniform_int_distribution<std::int64_t> pick(lo, hi - 1);
        idx = pick(rng);
      } else {
        idx = lo;
      }
    }
    plan.indices.push_back(std::min(idx, frame_count - 1));
  }
  return plan;
}

std::vector<std::int64_t> dense_clip_starts(std::int64_t frame_count,
                                            std::int64_t clip_len,
                                            std::int64_t num_clips) {
  if (num_clips < 1) throw std::invalid_argument("dense_clip: num_clips must be positive");
  const std::int64_t last = std::max<std::int64_t>(0, frame_count - clip_len);
  std::vector<std::int64_t> starts(num_clips);
  for (std::int64_t j = 0; j < num_clips; ++j)
    starts[j] = num_clips == 1 ? last / 2 : j * last / (num_clips - 1);
  return starts;
}

std::vector<ClipIndexPlan> dense_clip_sample(std::int64_t frame_count,
                                             std::int64_t clip_len,
                                             std::int64_t frames, Mode mode,
                                             std::int64_t num_clips,
                                             std::mt19937_64& rng) {
  if (frame_count < 1) throw std::invalid_argument("dense_clip: video has no frames");
  if (frames < 1 || clip_len < frames)
    throw std::invalid_argument("dense_clip: need 1 <= frames <= clip_len");
  const std::int64_t stride = clip_len / frames;
  std::vector<std::int64_t> starts;
  if (mode == Mode::train) {
    const std::int64_t last = std::max<std::int64_t>(0, frame_count - clip_len);
    std::uniform_int_distribution<std::int64_t> pick(0, last);
    starts.push_back(pick(rng));
  } else {
    starts = dense_clip_starts(frame_count, clip_len, num_clips);
  }
  std::vector<ClipIndexPlan> plans;
  for (auto s : starts) {
    ClipIndexPlan p;
    for (std::int64_t k = 0; k < frames; ++k)
      p.indices.push_back((s + k * stride) % frame_count);
    plans.push_back(std::move(p));
  }
  return plans;
}

std::int64_t default_max_short_side(std::int64_t crop) {
  return (crop * 256 + 112) / 224;
}

namespace {

void resized_extent(std::int64_t h, std::int64_t w, std::int64_t short_side,
                    std::int64_t& rh, std::int64_t& rw) {
  if (h <= w) {
    rh = short_side;
    rw = std::max<std::int64_t>(
        short_side, std::llround(static_cast<double>(w) * short_side / h));
  } else {
    rw = short_side;
    rh = std::max<std::int64_t>(
        short_side, std::llround(static_cast<double>(h) * short_side / w));
  }
}

}  // namespace

CropPlan plan_crop(std::int64_t height, std::int64_t width, std::int64_t crop,
                   Mode mode, std::mt19937_64& rng, std::int64_t max_short) {
  if (height < 1 || width < 1 || crop < 1)
    throw std::invalid_argument("plan_crop: extents must be positive");
  CropPlan p;
  p.size = crop;
  if (mode == Mode::train) {
    if (max_short <= 0) max_short = default_max_short_side(crop);
    if (max_short < crop)
      throw std::invalid_argument("plan_crop: max shorter side below crop size");
    std::uniform_int_distribution<std::int64_t> side(crop, max_short);
    resized_extent(height, width, side(rng), p.resize_height, p.resize_width);
    std::uniform_int_distribution<std::int64_t> top(0, p.resize_height - crop);
    std::uniform_int_distribution<std::int64_t> left(0, p.resize_width - crop);
    p.top = top(rng);
    p.left = left(rng);
  } else {
    resized_extent(height, width, crop, p.resize_height, p.resize_width);
    p.top = (p.resize_height - crop) / 2;
    p.left = (p.resize_width - crop) / 2;
  }
  return p;
}

std::array<CropPlan, 3> three_crop_plans(std::int64_t height, std::int64_t width,
                                         std::int64_t crop) {
  std::array<CropPlan, 3> plans;
  std::int64_t rh = 0, rw = 0;
  resized_extent(height, width, crop, rh, rw);
  for (int i = 0; i < 3; ++i) {
    auto& p = plans[i];
    p.resize_height = rh;
    p.resize_width = rw;
    p.size = crop;
    if (rw >= rh) {
      p.top = (rh - crop) / 2;
      p.left = i * (rw - crop) / 2;
    } else {
      p.left = (rw - crop) / 2;
      p.top = i * (rh - crop) / 2;
    }
  }
  return plans;
}

Tensor spatial_transform(const std::vector<Image>& frames, const CropPlan& plan,
                         const Normalization& norm) {
  if (frames.empty()) throw std::invalid_argument("spatial_transform: no frames");
  const std::int64_t T = static_cast<std::int64_t>(frames.size());
  const std::int64_t S = plan.size;
  const std::int64_t H = frames[0].height, W = frames[0].width;
  if (plan.top < 0 || plan.left < 0 || plan.top + S > plan.resize_height ||
      plan.left + S > plan.resize_width)
    throw std::invalid_argument("spatial_transform: crop does not fit resized frame");
  for (const auto& f : frames)
    if (f.height != H || f.width != W)
      throw std::invalid_argument("spatial_transform: frames differ in extent");

  // Source coordinates of every output row/column (half-pixel centres).
  struct Tap {
    std::int64_t i0, i1;
    double w1;
  };
  auto taps = [](std::int64_t out_len, std::int64_t offset, std::int64_t resized,
                 std::int64_t src_len) {
    std::vector<Tap> t(out_len);
    const double scale = static_cast<double>(src_len) / resized;
    for (std::int64_t o = 0; o < out_len; ++o) {
      double s = (static_cast<double>(o + offset) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src_len - 1));
      const auto i0 = static_cast<std::int64_t>(std::floor(s));
      const auto i1 = std::min(i0 + 1, src_len - 1);
      t[o] = {i0, i1, s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(S, plan.top, plan.resize_height, H);
  const auto tx = taps(S, plan.left, plan.resize_width, W);

  std::vector<double> out(3 * T * S * S);
  for (int c = 0; c < 3; ++c) {
    const double inv_std = 1.0 / norm.std[c];
    for (std::int64_t t = 0; t < T; ++t) {
      const auto& img = frames[t];
      double* dst = out.data() + ((c * T + t) * S) * S;
      for (std::int64_t y = 0; y < S; ++y) {
        const auto& a = ty[y];
        for (std::int64_t x = 0; x < S; ++x) {
          const auto& b = tx[x];
          const double v00 = img.at(c, a.i0, b.i0), v01 = img.at(c, a.i0, b.i1);
          const double v10 = img.at(c, a.i1, b.i0), v11 = img.at(c, a.i1, b.i1);
          const double top = v00 + (v01 - v00) * b.w1;
          const double bot = v10 + (v11 - v10) * b.w1;
          const double v = (top + (bot - top) * a.w1) / 255.0;
          dst[y * S + x] = (v - norm.mean[c]) * inv_std;
        }
      }
    }
  }
  return Tensor::from_data({3, T, S, S}, std::move(out));
}

std::array<Tensor, 3> three_crop(const std::vector<Image>& frames,
                                 std::int64_t crop, const Normalization& norm) {
  if (frames.empty()) throw std::invalid_argument("three_crop: no frames");
  const auto plans = three_crop_plans(frames[0].height, frames[0].width, crop);
  return {spatial_transform(frames, plans[0], norm),
          spatial_transform(frames, plans[1], norm),
          spatial_transform(frames, plans[2], norm)};
}

std::vector<double> multiview_aggregate(
    const std::vector<std::vector<double>>& per_view_probs) {
  if (per_view_probs.empty())
    throw std::invalid_argument("multiview_aggregate: no views");
  const std::size_t K = per_view_probs[0].size();
  std::vector<double> mean(K, 0.0);
  for (const auto& v : per_view_probs) {
    if (v.size() != K)
      throw std::invalid_argument("multiview_aggregate: views differ in class count");
    for (std::size_t k = 0; k < K; ++k) mean[k] += v[k];
  }
  for (auto& m : mean) m /= static_cast<double>(per_view_probs.size());
  return mean;
}

}  // namespace sevnet
