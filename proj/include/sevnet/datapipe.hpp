// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sevnet/tensor.hpp"

namespace sevnet {

/// 8-bit RGB frame stored planar: 3 x height x width.
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int c, std::int64_t y, std::int64_t x) const {
    return pixels[(c * height + y) * width + x];
  }
};

struct VideoRecord {
  std::string id;
  std::int64_t frame_count = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int64_t> labels;  // positive classes; one for single-label
  std::function<Image(std::int64_t)> frame;

  Image read(std::int64_t index) const;
};

/// Resize-then-crop geometry shared by every frame of a clip.
struct CropPlan {
  std::int64_t resize_height = 0;
  std::int64_t resize_width = 0;
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t size = 0;
};

struct ClipIndexPlan {
  std::vector<std::int64_t> indices;
  CropPlan crop;
};

enum class Sampler { segment, dense_clip };

const char* to_string(Sampler s);
Sampler parse_sampler(const std::string& text);

/// Segment sampling: split [0, frame_count) into `num_segments` equal
/// segments; train draws one uniform index per segment, eval takes each
/// segment's middle frame.
ClipIndexPlan segment_sample(std::int64_t frame_count, std::int64_t num_segments,
                             Mode mode, std::mt19937_64& rng);

/// Clip starts for dense sampling in eval mode: `num_clips` starts evenly
/// spaced over [0, max(0, frame_count - clip_len)], endpoints included.
std::vector<std::int64_t> dense_clip_starts(std::int64_t frame_count,
                                            std::int64_t clip_len,
                                            std::int64_t num_clips);

/// Dense clip sampling: `frames` indices at stride clip_len / frames inside a
/// window of `clip_len` consecutive frames. Train returns one plan at a random
/// start, eval returns `num_clips` plans. Indices wrap modulo frame_count.
std::vector<ClipIndexPlan> dense_clip_sample(std::int64_t frame_count,
                                             std::int64_t clip_len,
                                             std::int64_t frames, Mode mode,
                                             std::int64_t num_clips,
                                             std::mt19937_64& rng);

/// Default upper bound of the train-time shorter-side range: crop * 256 / 224.
std::int64_t default_max_short_side(std::int64_t crop);

/// Train: shorter side uniform in [crop, max_short], random square crop.
/// Eval: shorter side = crop, centre crop.
CropPlan plan_crop(std::int64_t height, std::int64_t width, std::int64_t crop,
                   Mode mode, std::mt19937_64& rng, std::int64_t max_short = 0);

/// Left/centre/right (top/centre/bottom for portrait) crops after resizing
/// the shorter side to `crop`.
std::array<CropPlan, 3> three_crop_plans(std::int64_t height, std::int64_t width,
                                         std::int64_t crop);

struct Normalization {
  std::array<double, 3> mean{0.45, 0.45, 0.45};
  std::array<double, 3> std{0.225, 0.225, 0.225};
};

/// Bilinear resize (half-pixel centres) followed by the crop, pixel scaling
/// to [0, 1] and per-channel normalization. Returns 3 x T x size x size.
Tensor spatial_transform(const std::vector<Image>& frames, const CropPlan& plan,
                         const Normalization& norm);

std::array<Tensor, 3> three_crop(const std::vector<Image>& frames,
                                 std::int64_t crop, const Normalization& norm);

/// Arithmetic mean of per-view class probabilities.
std::vector<double> multiview_aggregate(
    const std::vector<std::vector<double>>& per_view_probs);

}  // namespace sevnet
