#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrsink/model/model.hpp"
#include "ctrsink/numerics/optim.hpp"
#include "ctrsink/retrieval/pipeline.hpp"
#include "ctrsink/training/metrics.hpp"

namespace ctrsink {

struct StageConfig {
  std::string name = "single";
  std::optional<Pooling> pooling;  // unset: the model's configured pooling
  std::size_t epochs = 3;
  double peak_lr = 1e-3;
  double warm_ratio = 0.05;
  double weight_decay = 0.01;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

struct TwoStageConfig {
  StageConfig stage1{.name = "stage1", .pooling = Pooling::sink_mean};
  StageConfig stage2{.name = "stage2", .pooling = std::nullopt};
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;    // 1-based within the stage
  std::uint64_t step = 0;   // optimizer steps taken in this stage so far
  double lr = 0.0;          // rate of the last step in the epoch
  double loss = 0.0;        // sample-weighted mean training loss
  std::optional<double> val_auc;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::uint64_t optimizer_steps = 0;
};

inline void write_training_log(std::ostream& out, const TrainingLog& log) {
  for (const auto& r : log.epochs) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["epoch"] = r.epoch;
    j["step"] = r.step;
    j["lr"] = r.lr;
    j["loss"] = r.loss;
    j["val_auc"] = r.val_auc ? nlohmann::ordered_json(*r.val_auc) : nlohmann::ordered_json(nullptr);
    out << j.dump() << '\n';
  }
}

inline std::size_t steps_per_epoch(std::size_t n_samples, std::size_t batch_size) {
  return (n_samples + batch_size - 1) / batch_size;
}

// Optimizer steps a stage will take; the epoch-parity comparison relies on it.
inline std::uint64_t planned_steps(std::size_t n_samples, const StageConfig& stage) {
  return std::uint64_t(stage.epochs) * steps_per_epoch(n_samples, stage.batch_size);
}

struct Evaluation {
  std::optional<double> auc;  // unset when the labels hold a single class
  double mean_loss = 0.0;
  std::vector<double> scores;  // logits
};

// Dropout off, no graph.
template <class T>
Evaluation evaluate(const Model<T>& model, const LabeledSequences& data, std::optional<Pooling> pooling = {},
                    std::size_t batch_size = 256) {
  if (data.size() == 0) throw InvalidArgument("evaluate: empty data");
  NoGradGuard no_grad;
  Evaluation ev;
  ev.scores.reserve(data.size());
  ForwardOptions opt;
  opt.pooling = pooling;
  double loss = 0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    std::vector<const TokenSequence*> batch;
    for (std::size_t i = b; i < e; ++i) batch.push_back(&data.sequences[i]);
    auto res = forward_batch(model, batch, opt);
    for (std::size_t i = b; i < e; ++i) {
      const double z = double(res.logits.data()[i - b]);
      ev.scores.push_back(z);
      loss += bce_loss(z, data.labels[i]);
    }
  }
  ev.mean_loss = loss / double(data.size());
  try {
    ev.auc = auc(ev.scores, data.labels);
  } catch (const SingleClassError&) {
  }
  return ev;
}

template <class T>
TrainingLog train_stage(Model<T>& model, const LabeledSequences& train, const LabeledSequences* val,
                        const StageConfig& stage) {
  if (train.size() == 0) throw InvalidArgument("train_stage: empty training data");
  if (stage.epochs < 1) throw InvalidArgument("train_stage: epochs must be at least 1");
  if (stage.batch_size < 1) throw InvalidArgument("train_stage: batch_size must be at least 1");
  const Pooling pooling = stage.pooling.value_or(model.config.pooling);
  if (pooling == Pooling::sink_mean)
    for (const auto& s : train.sequences)
      if (s.sink_positions().empty()) throw InvalidArgument("train_stage: sink_mean pooling on a sequence without sinks");
  if (pooling == Pooling::last_token && model.config.arch_mode != ArchMode::causal)
    throw InvalidArgument("train_stage: last_token pooling requires causal mode");

  auto params = model.parameters();
  AdamWConfig adam;
  adam.lr = stage.peak_lr;
  adam.weight_decay = stage.weight_decay;
  auto state = make_optimizer_state(params, adam);

  const std::size_t n = train.size();
  const std::uint64_t total = planned_steps(n, stage);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(stage.seed);

  TrainingLog log;
  ForwardOptions opt;
  opt.training = true;
  opt.pooling = pooling;
  for (std::size_t epoch = 1; epoch <= stage.epochs; ++epoch) {
    if (stage.shuffle)
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[std::size_t(rng() % i)]);
    double loss_sum = 0, lr = 0;
    for (std::size_t b = 0; b < n; b += stage.batch_size) {
      const std::size_t e = std::min(n, b + stage.batch_size);
      std::vector<const TokenSequence*> batch;
      std::vector<int> labels;
      for (std::size_t i = b; i < e; ++i) {
        batch.push_back(&train.sequences[order[i]]);
        labels.push_back(train.labels[order[i]]);
      }
      lr = lr_at_step(state.step, total, stage.peak_lr, stage.warm_ratio);
      opt.dropout_seed = detail::mix64(stage.seed ^ detail::mix64(state.step + 1));
      model.zero_grad();
      auto res = forward_batch(model, batch, opt);
      auto loss = bce_with_logits(res.logits, std::span<const int>(labels));
      backward(loss);
      adamw_step(params, state, lr);
      loss_sum += double(loss.item()) * double(e - b);
    }
    EpochRecord rec{stage.name, epoch, state.step, lr, loss_sum / double(n), std::nullopt};
    if (val && val->size() > 0) rec.val_auc = evaluate(model, *val, pooling).auc;
    log.epochs.push_back(rec);
  }
  model.zero_grad();
  log.optimizer_steps = state.step;
  return log;
}

// Stage 1 predicts from sink rows only, stage 2 from the configured pooling.
// Each stage starts a fresh optimizer and schedule; parameters carry over.
template <class T>
TrainingLog two_stage_train(Model<T>& model, const LabeledSequences& train, const LabeledSequences* val,
                            const TwoStageConfig& cfg) {
  for (const auto& s : train.sequences)
    if (s.sink_positions().empty()) throw InvalidArgument("two_stage_train: sequences must carry sinks");
  TrainingLog log;
  if (cfg.stage1.epochs > 0) {
    StageConfig s1 = cfg.stage1;
    s1.pooling = Pooling::sink_mean;
    auto l1 = train_stage(model, train, val, s1);
    log.epochs.insert(log.epochs.end(), l1.epochs.begin(), l1.epochs.end());
    log.optimizer_steps += l1.optimizer_steps;
  }
  auto l2 = train_stage(model, train, val, cfg.stage2);
  log.epochs.insert(log.epochs.end(), l2.epochs.begin(), l2.epochs.end());
  log.optimizer_steps += l2.optimizer_steps;
  return log;
}

}  // namespace ctrsink
