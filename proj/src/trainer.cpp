// SPDX-License-Identifier: Apache-2.0
#include "sevnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "sevnet/checkpoint.hpp"
#include "sevnet/metrics.hpp"
#include "sevnet/rng.hpp"

namespace sevnet {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs)
    throw std::invalid_argument("train: warmup epochs must lie in [0, epochs)");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (micro_batch < 0 || (micro_batch > 0 && batch_size % micro_batch != 0))
    throw std::invalid_argument("train: micro batch must divide batch size");
  if (!(base_lr >= 0.0)) throw std::invalid_argument("train: base_lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight decay must be >= 0");
}

// -- schedule ----------------------------------------------------------------

LrSchedule LrSchedule::from_config(const TrainConfig& config,
                                   std::int64_t steps_per_epoch) {
  LrSchedule s;
  s.peak = config.peak_lr();
  s.warmup_steps = config.warmup_epochs * steps_per_epoch;
  s.total_steps = config.epochs * steps_per_epoch;
  return s;
}

double LrSchedule::at(std::int64_t step) const {
  if (step < 0 || step >= total_steps)
    throw std::out_of_range("lr schedule: step " + std::to_string(step) +
                            " outside [0, " + std::to_string(total_steps) + ")");
  if (step < warmup_steps)
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const double q = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * q));
}

double lr_at(std::int64_t step, const LrSchedule& schedule) { return schedule.at(step); }

// -- SGD -------------------------------------------------------------------

void sgd_step(std::span<double> weight, std::span<const double> grad,
              std::span<double> velocity, double lr, double momentum,
              double weight_decay) {
  if (grad.size() != weight.size() || velocity.size() != weight.size())
    throw std::invalid_argument("sgd_step: misaligned buffers");
  for (std::size_t i = 0; i < weight.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * weight[i]);
    weight[i] -= lr * velocity[i];
  }
}

Sgd::Sgd(std::vector<NamedParam> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& p : params_)
    velocity_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
}

void Sgd::step(double lr) {
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad())
      if (!std::isfinite(g))
        throw std::runtime_error("non-finite gradient in parameter " + p.name);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    std::vector<double> zero;
    std::span<const double> g = p.tensor.grad();
    if (!p.tensor.has_grad()) {
      zero.assign(velocity_[i].size(), 0.0);
      g = zero;
    }
    sgd_step(p.tensor.mutable_data(), g, velocity_[i], lr, momentum_,
             p.decay ? weight_decay_ : 0.0);
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

// -- serialization -----------------------------------------------------------

namespace {

nlohmann::json eval_json(const EvalMetrics& m) {
  nlohmann::json j{{"samples", m.samples},
                   {"top1", m.top1},
                   {"top5", m.top5},
                   {"mean_class_accuracy", m.mean_class_accuracy}};
  if (m.map) j["map"] = *m.map;
  return j;
}

nlohmann::json epoch_json(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"lr", r.lr}};
  if (r.train_eval) j["train_eval"] = eval_json(*r.train_eval);
  if (r.eval) j["eval"] = eval_json(*r.eval);
  return j;
}

}  // namespace

std::string to_json_line(const EpochRecord& r) { return epoch_json(r).dump(); }

std::string to_json(const EvalMetrics& m) { return eval_json(m).dump(1); }

std::string to_json(const RunMetrics& m) {
  nlohmann::json j;
  j["best_epoch"] = m.best_epoch;
  j["steps"] = m.lr_trace.size();
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : m.epochs) j["epochs"].push_back(epoch_json(e));
  if (!m.epochs.empty()) j["final"] = epoch_json(m.epochs.back());
  return j.dump(1);
}

// -- evaluation --------------------------------------------------------------

EvalMetrics evaluate(Model& model, const ClipDataset& data, bool multi_label,
                     std::int64_t batch) {
  const std::int64_t N = data.size(), K = model.config().num_classes;
  if (data.num_classes() != K)
    throw std::invalid_argument("evaluate: dataset has " +
                                std::to_string(data.num_classes()) +
                                " classes, model " + std::to_string(K));
  if (N == 0) throw std::invalid_argument("evaluate: empty dataset");
  NoGradGuard no_grad;
  std::vector<double> scores;
  std::vector<std::int64_t> labels;
  std::vector<double> targets;
  for (std::int64_t i = 0; i < N; ++i) {
    const auto views = data.eval_views(i);
    std::vector<std::vector<double>> probs;
    for (std::size_t v0 = 0; v0 < views.size(); v0 += batch) {
      const std::size_t vn = std::min<std::size_t>(batch, views.size() - v0);
      const Shape& vs = views[v0].shape();
      const std::int64_t per = views[v0].numel();
      std::vector<double> buf(static_cast<std::size_t>(per * vn));
      for (std::size_t j = 0; j < vn; ++j)
        std::copy(views[v0 + j].data().begin(), views[v0 + j].data().end(),
                  buf.begin() + static_cast<std::ptrdiff_t>(j * per));
      const Tensor x = Tensor::from_data(
          {static_cast<std::int64_t>(vn), vs[0], vs[1], vs[2], vs[3]}, std::move(buf));
      const Tensor logits = model.forward(x, Mode::eval);
      const auto p = softmax_rows(logits.data(), static_cast<std::int64_t>(vn), K);
      for (std::size_t j = 0; j < vn; ++j)
        probs.emplace_back(p.begin() + static_cast<std::ptrdiff_t>(j * K),
                           p.begin() + static_cast<std::ptrdiff_t>((j + 1) * K));
    }
    const auto agg = multiview_aggregate(probs);
    scores.insert(scores.end(), agg.begin(), agg.end());
    labels.push_back(data.label(i));
    if (multi_label) {
      std::vector<double> row(K, 0.0);
      for (auto l : data.video(i).labels) row[l] = 1.0;
      targets.insert(targets.end(), row.begin(), row.end());
    }
  }
  EvalMetrics m;
  m.samples = N;
  m.top1 = topk_accuracy(scores, N, K, labels, 1);
  m.top5 = topk_accuracy(scores, N, K, labels, std::min<std::int64_t>(5, K));
  m.mean_class_accuracy = mean_class_accuracy(scores, N, K, labels);
  if (multi_label) m.map = mean_average_precision(scores, N, K, targets);
  return m;
}

// -- Trainer -----------------------------------------------------------------

Trainer::Trainer(Model& model, const ClipDataset& train, TrainConfig config)
    : model_(model),
      train_(train),
      config_(config),
      sgd_(model.parameters(), config.momentum, config.weight_decay) {
  config_.validate();
  if (train.num_classes() != model.config().num_classes)
    throw std::invalid_argument("fit: dataset has " +
                                std::to_string(train.num_classes()) +
                                " classes but the model predicts " +
                                std::to_string(model.config().num_classes));
  if (train.size() < 1) throw std::invalid_argument("fit: training split is empty");
  if (train.frames() != model.config().frames || train.crop() != model.config().height ||
      model.config().height != model.config().width)
    throw std::invalid_argument("fit: dataset clip geometry does not match the model input");
  schedule_ = LrSchedule::from_config(config_, steps_per_epoch());
}

std::int64_t Trainer::steps_per_epoch() const {
  return (train_.size() + config_.batch_size - 1) / config_.batch_size;
}

std::vector<std::int64_t> Trainer::epoch_order(std::int64_t epoch) const {
  std::vector<std::int64_t> order(static_cast<std::size_t>(train_.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  std::mt19937_64 rng(derive_seed(config_.seed, {0x5u, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng);
  if (!config_.class_balanced) return order;

  // Deal the shuffled samples out class by class, one round at a time.
  std::vector<std::vector<std::int64_t>> by_class(
      static_cast<std::size_t>(train_.num_classes()));
  for (auto i : order) by_class[static_cast<std::size_t>(train_.label(i))].push_back(i);
  std::vector<std::size_t> classes(by_class.size());
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c;
  std::vector<std::int64_t> dealt;
  dealt.reserve(order.size());
  for (std::size_t round = 0; dealt.size() < order.size(); ++round) {
    std::shuffle(classes.begin(), classes.end(), rng);
    for (auto c : classes)
      if (round < by_class[c].size()) dealt.push_back(by_class[c][round]);
  }
  return dealt;
}

double Trainer::train_step(std::int64_t epoch, std::int64_t step,
                           std::span<const std::int64_t> indices) {
  const std::int64_t total = static_cast<std::int64_t>(indices.size());
  const std::int64_t micro = config_.micro_batch_size();
  const std::int64_t K = model_.config().num_classes;
  std::mt19937_64 drop_rng(derive_seed(config_.seed, {0x2u, static_cast<std::uint64_t>(step)}));
  sgd_.zero_grad();
  double loss_sum = 0;
  for (std::int64_t m0 = 0; m0 < total; m0 += micro) {
    const std::int64_t mn = std::min(micro, total - m0);
    std::vector<double> buf;
    std::vector<std::int64_t> labels;
    std::vector<double> targets;
    Shape clip_shape;
    for (std::int64_t j = 0; j < mn; ++j) {
      const std::int64_t idx = indices[m0 + j];
      std::mt19937_64 rng(derive_seed(config_.seed, {0x1u, static_cast<std::uint64_t>(epoch),
                                                     static_cast<std::uint64_t>(idx)}));
      const Tensor clip = train_.train_clip(idx, rng);
      clip_shape = clip.shape();
      buf.insert(buf.end(), clip.data().begin(), clip.data().end());
      labels.push_back(train_.label(idx));
      if (config_.multi_label) {
        std::vector<double> row(K, 0.0);
        for (auto l : train_.video(idx).labels) row[l] = 1.0;
        targets.insert(targets.end(), row.begin(), row.end());
      }
    }
    const Tensor x = Tensor::from_data(
        {mn, clip_shape[0], clip_shape[1], clip_shape[2], clip_shape[3]}, std::move(buf));
    const Tensor logits = model_.forward(x, Mode::train, &drop_rng);
    Tensor loss = config_.multi_label ? multilabel_bce(logits, targets)
                                      : softmax_cross_entropy(logits, labels);
    loss_sum += loss.item() * static_cast<double>(mn);
    // Weight micro-batches so the accumulated gradient is the batch mean.
    const Tensor weight =
        Tensor::full({1}, static_cast<double>(mn) / static_cast<double>(total));
    backward(mul(loss, weight));
  }
  sgd_.step(schedule_.at(step));
  return loss_sum / static_cast<double>(total);
}

// -- fit ---------------------------------------------------------------------

RunMetrics fit(Model& model, const ClipDataset& train, const ClipDataset* eval,
               const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (eval && eval->num_classes() != model.config().num_classes)
    throw std::invalid_argument("fit: eval dataset has " +
                                std::to_string(eval->num_classes()) +
                                " classes but the model predicts " +
                                std::to_string(model.config().num_classes));
  Trainer trainer(model, train, config);
  const std::filesystem::path dir = options.output_dir;
  std::ofstream log;
  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(dir);
    log.open(dir / "metrics.jsonl");
    if (!log) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
  }

  RunMetrics run;
  double best = -1.0;
  std::int64_t step = 0;
  const std::int64_t spe = trainer.steps_per_epoch();
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = trainer.epoch_order(epoch);
    double loss_sum = 0;
    for (std::int64_t s = 0; s < spe; ++s, ++step) {
      const std::int64_t b0 = s * config.batch_size;
      const std::int64_t bn =
          std::min<std::int64_t>(config.batch_size, train.size() - b0);
      const std::span<const std::int64_t> idx(order.data() + b0,
                                              static_cast<std::size_t>(bn));
      loss_sum += trainer.train_step(epoch, step, idx) * static_cast<double>(bn);
      run.lr_trace.push_back(trainer.schedule().at(step));
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.lr = run.lr_trace.back();
    if (config.eval_train) rec.train_eval = evaluate(model, train, config.multi_label);
    if (eval) rec.eval = evaluate(model, *eval, config.multi_label);
    run.epochs.push_back(rec);

    const std::optional<EvalMetrics>& score = eval ? rec.eval : rec.train_eval;
    const double current = score ? score->top1 : -rec.train_loss;
    if (current > best) {
      best = current;
      run.best_epoch = epoch;
      if (!options.output_dir.empty()) save_checkpoint(model, (dir / "best.ckpt").string());
    }
    if (log) log << to_json_line(rec) << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (!options.output_dir.empty()) {
    save_checkpoint(model, (dir / "final.ckpt").string());
    std::ofstream summary(dir / "summary.json");
    summary << to_json(run) << '\n';
  }
  return run;
}

}  // namespace sevnet
