// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "knnkd/corpus.h"
#include "knnkd/model.h"

namespace knnkd::nmt {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient L2 norm cap; 0 disables
};

/// Linear warmup from warmup_init_lr to peak_lr, then inverse square root
/// decay, floored at min_lr (never below 0).
struct LrSchedule {
  double peak_lr = 5e-4;
  double warmup_init_lr = 1e-7;
  double min_lr = 1e-9;
  std::size_t warmup_steps = 200;

  double at(std::size_t step) const;
};

struct OptimizerState {
  std::vector<double> m, v;
  std::size_t step = 0;
};

/// Loss at one target position. Receives the student distribution and writes
/// dLoss/dlogits for that position into `grad_logits` (pre-zeroed).
using PositionLoss = std::function<LossValue(std::size_t pair, std::size_t position,
                                             std::span<const double> probs, TokenId target,
                                             std::span<double> grad_logits)>;

/// Cross-entropy against the reference token: grad = p - onehot(target).
PositionLoss ce_position_loss();

struct StepResult {
  double loss = 0.0;       // mean over the batch's target tokens
  std::size_t tokens = 0;
  std::size_t clamped = 0;
  double lr = 0.0;
};

/// One Adam update on the batch-mean loss. Throws NumericalError (leaving
/// the model and optimizer untouched) if the loss is not finite.
StepResult train_step(Model& model, const corpus::ParallelCorpus& corpus,
                      std::span<const std::size_t> batch, const PositionLoss& loss,
                      OptimizerState& opt, const AdamConfig& adam, const LrSchedule& schedule);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;  // sentence pairs per update
  std::uint64_t shuffle_seed = 1;
  AdamConfig adam;
  LrSchedule schedule;
};

struct TrainLog {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  std::size_t updates = 0;
  std::size_t clamped = 0;
  double seconds = 0.0;
  double updates_per_second() const { return seconds > 0 ? static_cast<double>(updates) / seconds : 0.0; }
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Shuffled mini-batch training over the whole corpus.
TrainLog train(Model& model, const corpus::ParallelCorpus& corpus, const PositionLoss& loss,
               const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace knnkd::nmt
