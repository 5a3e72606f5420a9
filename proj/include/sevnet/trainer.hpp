// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sevnet/network.hpp"
#include "sevnet/synthetic.hpp"

namespace sevnet {

struct TrainConfig {
  std::int64_t epochs = 64;
  std::int64_t warmup_epochs = 4;
  double base_lr = 0.01;          // per 8 samples of effective batch
  std::int64_t batch_size = 64;   // effective (total) batch
  std::int64_t micro_batch = 0;   // 0 means batch_size; otherwise must divide it
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool eval_train = false;  // score the training split every epoch
  bool class_balanced = false;  // round-robin classes within each epoch's order
  bool multi_label = false;

  void validate() const;
  std::int64_t micro_batch_size() const { return micro_batch > 0 ? micro_batch : batch_size; }
  /// Linear scaling law: base_lr x batch_size / 8.
  double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 8.0; }
};

/// Linear warmup into a half-cosine decay, indexed by optimizer step.
struct LrSchedule {
  double peak = 0.0;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  static LrSchedule from_config(const TrainConfig& config,
                                std::int64_t steps_per_epoch);
  double at(std::int64_t step) const;
};

double lr_at(std::int64_t step, const LrSchedule& schedule);

/// v <- momentum * v + (g + wd * w); w <- w - lr * v.
void sgd_step(std::span<double> weight, std::span<const double> grad,
              std::span<double> velocity, double lr, double momentum,
              double weight_decay);

/// SGD with momentum over a model's parameters. Weight decay applies only to
/// parameters flagged for it (conv and classifier weights).
class Sgd {
 public:
  Sgd(std::vector<NamedParam> params, double momentum, double weight_decay);

  /// Throws naming the parameter if any gradient is non-finite.
  void step(double lr);
  void zero_grad();
  const std::vector<NamedParam>& params() const { return params_; }
  /// Momentum buffers, parallel to params().
  std::vector<std::vector<double>>& velocity() { return velocity_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

struct EvalMetrics {
  std::int64_t samples = 0;
  double top1 = 0;
  double top5 = 0;
  double mean_class_accuracy = 0;
  std::optional<double> map;  // multi-label runs only
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double train_loss = 0;
  double lr = 0;  // at the epoch's last step
  std::optional<EvalMetrics> train_eval;
  std::optional<EvalMetrics> eval;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  std::vector<double> lr_trace;  // one entry per optimizer step
  std::int64_t best_epoch = -1;
};

std::string to_json_line(const EpochRecord& r);
std::string to_json(const RunMetrics& m);
std::string to_json(const EvalMetrics& m);

/// Scores every sample with the dataset's test protocol (single centre crop
/// or multi-view averaging of softmax probabilities).
EvalMetrics evaluate(Model& model, const ClipDataset& data, bool multi_label = false,
                     std::int64_t batch = 8);

/// One optimization stream over a model. Exposed step-wise so runs can be
/// replayed from checkpoints.
class Trainer {
 public:
  Trainer(Model& model, const ClipDataset& train, TrainConfig config);

  std::int64_t steps_per_epoch() const;
  const LrSchedule& schedule() const { return schedule_; }
  Sgd& optimizer() { return sgd_; }
  /// Sample order of one epoch: a seeded shuffle, optionally interleaved so
  /// consecutive samples cycle through the classes.
  std::vector<std::int64_t> epoch_order(std::int64_t epoch) const;
  /// Forward/backward over `indices` (split into micro-batches) and one SGD
  /// update at the scheduled rate. Returns the mean loss over the batch.
  double train_step(std::int64_t epoch, std::int64_t step,
                    std::span<const std::int64_t> indices);

 private:
  Model& model_;
  const ClipDataset& train_;
  TrainConfig config_;
  LrSchedule schedule_;
  Sgd sgd_;
};

struct FitOptions {
  std::string output_dir;  // empty: keep checkpoints and logs in memory only
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Full training run. Best checkpoint is chosen by eval top-1 (train top-1
/// when no eval split is given), and written with the final checkpoint and
/// per-epoch log when an output directory is set.
RunMetrics fit(Model& model, const ClipDataset& train, const ClipDataset* eval,
               const TrainConfig& config, const FitOptions& options = {});

}  // namespace sevnet
