// SPDX-License-Identifier: Apache-2.0
#include "sevnet/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "sevnet/rng.hpp"

namespace sevnet {

const char* to_string(Split s) { return s == Split::train ? "train" : "eval"; }

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("synthetic: num_classes must be >= 2");
  if (frames_per_video < 1)
    throw std::invalid_argument("synthetic: frames_per_video must be >= 1");
  if (height < 8 || width < 8)
    throw std::invalid_argument("synthetic: frame extent must be at least 8x8");
  if (train_size < 0 || eval_size < 0)
    throw std::invalid_argument("synthetic: split sizes must be non-negative");
  if (blobs < 1 || blob_radius < 1)
    throw std::invalid_argument("synthetic: need at least one blob of radius >= 1");
  if (!(speed >= 0.0)) throw std::invalid_argument("synthetic: speed must be >= 0");
}

std::int64_t SyntheticSpec::split_size(Split split) const {
  return split == Split::train ? train_size : eval_size;
}

std::int64_t SyntheticSpec::label(Split split, std::int64_t index) const {
  if (index < 0 || index >= split_size(split))
    throw std::out_of_range(std::string("synthetic: index ") + std::to_string(index) +
                            " outside " + to_string(split) + " split of size " +
                            std::to_string(split_size(split)));
  return index % num_classes;
}

namespace {

struct Blob {
  double x0, y0, radius;
  std::array<double, 3> color;
};

struct VideoParams {
  std::uint64_t texture_seed;
  double vx, vy;
  std::vector<Blob> blobs;
};

double hash_unit(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                 std::uint64_t c) {
  const std::uint64_t h = derive_seed(seed, {a, b, c});
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

Image render_frame(const SyntheticSpec& spec, const VideoParams& vp,
                   std::int64_t f) {
  const std::int64_t H = spec.height, W = spec.width;
  Image img;
  img.height = H;
  img.width = W;
  img.pixels.resize(static_cast<std::size_t>(3 * H * W));
  std::vector<double> rgb(static_cast<std::size_t>(3 * H * W));

  // Static background: 32x32 cells of muted coloured noise.
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        rgb[(c * H + y) * W + x] =
            70.0 + 60.0 * hash_unit(vp.texture_seed, static_cast<std::uint64_t>(y / 32),
                                    static_cast<std::uint64_t>(x / 32),
                                     static_cast<std::uint64_t>(c));

  // Discs drift with the class velocity on a torus.
  const double t = static_cast<double>(f);
  for (std::size_t b = 0; b < vp.blobs.size(); ++b) {
    const auto& blob = vp.blobs[b];
    const double cx = std::fmod(std::fmod(blob.x0 + vp.vx * t, W) + W, W);
    const double cy = std::fmod(std::fmod(blob.y0 + vp.vy * t, H) + H, H);
    const auto r = static_cast<std::int64_t>(std::ceil(blob.radius));
    for (std::int64_t dy = -r; dy <= r; ++dy)
      for (std::int64_t dx = -r; dx <= r; ++dx) {
        const double d2 = static_cast<double>(dx * dx + dy * dy);
        if (d2 > blob.radius * blob.radius) continue;
        const std::int64_t px = ((static_cast<std::int64_t>(cx) + dx) % W + W) % W;
        const std::int64_t py = ((static_cast<std::int64_t>(cy) + dy) % H + H) % H;
        // Concentric rings give the disc internal texture that moves with it.
        const double ring = 0.75 + 0.25 * std::cos(std::sqrt(d2) * 0.6);
        for (int c = 0; c < 3; ++c)
          rgb[(c * H + py) * W + px] = blob.color[c] * ring;
      }
  }
  for (std::size_t i = 0; i < rgb.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(rgb[i]), 0L, 255L));
  return img;
}

}  // namespace

VideoRecord synth_video(const SyntheticSpec& spec, Split split, std::int64_t index) {
  spec.validate();
  const std::int64_t label = spec.label(split, index);
  std::mt19937_64 rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(split),
                                              static_cast<std::uint64_t>(index)}));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  VideoParams vp;
  vp.texture_seed = rng();
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(label) /
                       static_cast<double>(spec.num_classes);
  const double speed = spec.speed * (0.75 + 0.5 * u(rng));
  vp.vx = speed * std::cos(angle);
  vp.vy = speed * std::sin(angle);
  for (std::int64_t b = 0; b < spec.blobs; ++b) {
    Blob blob;
    blob.x0 = u(rng) * static_cast<double>(spec.width);
    blob.y0 = u(rng) * static_cast<double>(spec.height);
    blob.radius = static_cast<double>(spec.blob_radius) * (0.6 + 0.4 * u(rng));
    for (auto& c : blob.color) c = 30.0 + 225.0 * u(rng);
    vp.blobs.push_back(blob);
  }

  VideoRecord rec;
  rec.id = std::string(to_string(split)) + "/" + std::to_string(index);
  rec.frame_count = spec.frames_per_video;
  rec.height = spec.height;
  rec.width = spec.width;
  rec.labels = {label};
  rec.frame = [spec, vp = std::move(vp)](std::int64_t f) {
    return render_frame(spec, vp, f);
  };
  return rec;
}

// -- ClipDataset -----------------------------------------------------------

ClipDataset::ClipDataset(DataConfig config, Split split, std::int64_t frames,
                         std::int64_t crop)
    : config_(std::move(config)), split_(split), frames_(frames), crop_(crop) {
  config_.synth.validate();
  if (frames_ < 1 || crop_ < 1)
    throw std::invalid_argument("dataset: frames and crop must be positive");
  if (config_.sampler == Sampler::dense_clip &&
      (config_.clip_length < frames_ || config_.num_clips < 1))
    throw std::invalid_argument("dataset: dense clips need clip_length >= frames");
}

VideoRecord ClipDataset::video(std::int64_t index) const {
  return synth_video(config_.synth, split_, index);
}

std::int64_t ClipDataset::label(std::int64_t index) const {
  return config_.synth.label(split_, index);
}

namespace {

std::vector<Image> read_frames(const VideoRecord& v,
                               const std::vector<std::int64_t>& indices) {
  std::vector<Image> frames;
  frames.reserve(indices.size());
  for (auto i : indices) frames.push_back(v.read(i));
  return frames;
}

}  // namespace

Tensor ClipDataset::train_clip(std::int64_t index, std::mt19937_64& rng) const {
  const auto v = video(index);
  ClipIndexPlan plan =
      config_.sampler == Sampler::segment
          ? segment_sample(v.frame_count, frames_, Mode::train, rng)
          : dense_clip_sample(v.frame_count, config_.clip_length, frames_,
                              Mode::train, 1, rng)
                .front();
  plan.crop = plan_crop(v.height, v.width, crop_, Mode::train, rng,
                        config_.max_short_side);
  return spatial_transform(read_frames(v, plan.indices), plan.crop, config_.norm);
}

std::vector<Tensor> ClipDataset::eval_views(std::int64_t index) const {
  const auto v = video(index);
  std::mt19937_64 unused(0);
  std::vector<Tensor> views;
  if (config_.sampler == Sampler::segment) {
    auto plan = segment_sample(v.frame_count, frames_, Mode::eval, unused);
    plan.crop = plan_crop(v.height, v.width, crop_, Mode::eval, unused);
    views.push_back(
        spatial_transform(read_frames(v, plan.indices), plan.crop, config_.norm));
    return views;
  }
  for (const auto& plan : dense_clip_sample(v.frame_count, config_.clip_length,
                                            frames_, Mode::eval,
                                            config_.num_clips, unused)) {
    const auto frames = read_frames(v, plan.indices);
    if (config_.three_crop) {
      for (auto& t : three_crop(frames, crop_, config_.norm)) views.push_back(t);
    } else {
      views.push_back(spatial_transform(
          frames, plan_crop(v.height, v.width, crop_, Mode::eval, unused),
          config_.norm));
    }
  }
  return views;
}

}  // namespace sevnet
