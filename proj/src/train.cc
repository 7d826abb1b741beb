// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/train.h"

#include <chrono>
#include <cmath>

#include "knnkd/random.h"

namespace knnkd::nmt {

double LrSchedule::at(std::size_t step) const {
  double lr;
  if (warmup_steps > 0 && step < warmup_steps) {
    lr = warmup_init_lr +
         static_cast<double>(step) * (peak_lr - warmup_init_lr) / static_cast<double>(warmup_steps);
  } else {
    const double warm = static_cast<double>(std::max<std::size_t>(warmup_steps, 1));
    lr = peak_lr * std::sqrt(warm) / std::sqrt(static_cast<double>(std::max<std::size_t>(step, 1)));
  }
  if (peak_lr > 0.0) lr = std::max(lr, min_lr);
  return std::max(lr, 0.0);
}

PositionLoss ce_position_loss() {
  return [](std::size_t, std::size_t, std::span<const double> probs, TokenId target,
            std::span<double> grad) {
    LossValue out;
    double p = probs[target];
    if (p < kProbFloor) {
      p = kProbFloor;
      out.clamped = 1;
    }
    out.value = -std::log(p);
    for (std::size_t y = 0; y < probs.size(); ++y) grad[y] = probs[y];
    grad[target] -= 1.0;
    return out;
  };
}

StepResult train_step(Model& model, const corpus::ParallelCorpus& corpus,
                      std::span<const std::size_t> batch, const PositionLoss& loss,
                      OptimizerState& opt, const AdamConfig& adam, const LrSchedule& schedule) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const std::size_t v = model.config().tgt_vocab_size;
  std::size_t tokens = 0;
  for (std::size_t idx : batch) tokens += corpus.pairs.at(idx).target.size();
  const double scale = 1.0 / static_cast<double>(tokens);

  std::vector<double> grad(model.num_params(), 0.0);
  std::vector<double> dlogits;
  StepResult result;
  result.tokens = tokens;
  for (std::size_t idx : batch) {
    const auto& pair = corpus.pairs[idx];
    auto pass = teacher_forced(model, pair.source, pair.target);
    dlogits.assign(pair.target.size() * v, 0.0);
    for (std::size_t i = 0; i < pair.target.size(); ++i) {
      auto probs = softmax(pass.steps[i].logits);
      auto row = std::span(dlogits).subspan(i * v, v);
      LossValue lv = loss(idx, i, probs, pair.target[i], row);
      result.loss += lv.value;
      result.clamped += lv.clamped;
      for (double& g : row) g *= scale;
    }
    backward(model, pair.source, pass, dlogits, grad);
  }
  result.loss *= scale;
  if (!std::isfinite(result.loss)) throw NumericalError("non-finite training loss");

  if (adam.clip_norm > 0.0) {
    double norm = 0.0;
    for (double g : grad) norm += g * g;
    norm = std::sqrt(norm);
    if (norm > adam.clip_norm) {
      for (double& g : grad) g *= adam.clip_norm / norm;
    }
  }

  if (opt.m.size() != grad.size()) {
    opt.m.assign(grad.size(), 0.0);
    opt.v.assign(grad.size(), 0.0);
  }
  ++opt.step;
  result.lr = schedule.at(opt.step);
  const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(opt.step));
  auto params = model.params();
  for (std::size_t j = 0; j < grad.size(); ++j) {
    opt.m[j] = adam.beta1 * opt.m[j] + (1.0 - adam.beta1) * grad[j];
    opt.v[j] = adam.beta2 * opt.v[j] + (1.0 - adam.beta2) * grad[j] * grad[j];
    const double mhat = opt.m[j] / bc1;
    const double vhat = opt.v[j] / bc2;
    params[j] -= result.lr * mhat / (std::sqrt(vhat) + adam.eps);
  }
  return result;
}

TrainLog train(Model& model, const corpus::ParallelCorpus& corpus, const PositionLoss& loss,
               const TrainConfig& config, const EpochCallback& on_epoch) {
  if (corpus.pairs.empty()) throw std::invalid_argument("empty training corpus");
  if (config.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  TrainLog log;
  OptimizerState opt;
  Rng rng(config.shuffle_seed);
  std::vector<std::size_t> order(corpus.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t e = std::min(order.size(), b + config.batch_size);
      auto r = train_step(model, corpus, std::span(order).subspan(b, e - b), loss, opt, config.adam,
                          config.schedule);
      log.step_losses.push_back(r.loss);
      log.clamped += r.clamped;
      epoch_loss += r.loss;
      ++epoch_steps;
      ++log.updates;
    }
    log.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_steps));
    if (on_epoch) on_epoch(epoch, log.epoch_losses.back());
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace knnkd::nmt
