// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "sevnet/datapipe.hpp"

namespace sevnet {

enum class Split { train, eval };

const char* to_string(Split s);

/// Procedural motion dataset. Every video shows textured discs drifting
/// over a static noise background; the class fixes the drift direction.
/// Positions, colours and background are random per video, so a single
/// frame carries no class information.
struct SyntheticSpec {
  std::int64_t num_classes = 8;
  std::int64_t frames_per_video = 32;
  std::int64_t height = 256;
  std::int64_t width = 320;
  std::int64_t train_size = 64;
  std::int64_t eval_size = 64;
  std::int64_t blobs = 6;
  std::int64_t blob_radius = 28;
  double speed = 4.0;  // pixels per frame at the rendered resolution
  std::uint64_t seed = 1;

  void validate() const;
  std::int64_t split_size(Split split) const;
  /// Balanced labelling: index modulo class count.
  std::int64_t label(Split split, std::int64_t index) const;
};

VideoRecord synth_video(const SyntheticSpec& spec, Split split, std::int64_t index);

/// Sampling and preprocessing choices shared by training and evaluation.
struct DataConfig {
  SyntheticSpec synth;
  Sampler sampler = Sampler::segment;
  std::int64_t clip_length = 64;
  std::int64_t num_clips = 10;
  bool three_crop = true;
  std::int64_t max_short_side = 0;  // 0 means crop * 256 / 224
  Normalization norm;
};

/// A split of the synthetic dataset bound to a model's input geometry.
class ClipDataset {
 public:
  ClipDataset(DataConfig config, Split split, std::int64_t frames,
              std::int64_t crop);

  std::int64_t size() const { return config_.synth.split_size(split_); }
  std::int64_t num_classes() const { return config_.synth.num_classes; }
  std::int64_t frames() const { return frames_; }
  std::int64_t crop() const { return crop_; }
  const DataConfig& config() const { return config_; }
  Split split() const { return split_; }

  VideoRecord video(std::int64_t index) const;
  std::int64_t label(std::int64_t index) const;
  /// One augmented 3 x T x crop x crop clip.
  Tensor train_clip(std::int64_t index, std::mt19937_64& rng) const;
  /// Test views: one centre crop (segment sampler) or num_clips x 3 crops
  /// (dense clip sampler).
  std::vector<Tensor> eval_views(std::int64_t index) const;

 private:
  DataConfig config_;
  Split split_;
  std::int64_t frames_;
  std::int64_t crop_;
};

}  // namespace sevnet
