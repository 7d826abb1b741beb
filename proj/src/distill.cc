// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/distill.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>

#include "knnkd/io.h"

namespace knnkd::distill {

void DistillConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("tau must be > 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0,1]");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
}

double TeacherDistribution::prob(TokenId token) const {
  auto it = std::lower_bound(support.begin(), support.end(), token,
                             [](const auto& e, TokenId t) { return e.first < t; });
  return it != support.end() && it->first == token ? it->second : 0.0;
}

std::vector<double> TeacherDistribution::dense(std::size_t vocab_size) const {
  std::vector<double> out(vocab_size, 0.0);
  for (auto [t, p] : support) {
    if (t >= vocab_size) throw std::out_of_range("teacher token outside vocabulary");
    out[t] = p;
  }
  return out;
}

namespace {

template <typename Range>
TeacherDistribution teacher_impl(const Range& neighbors, double tau) {
  if (neighbors.empty()) throw std::invalid_argument("empty neighbor set");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  double min_d = INFINITY;
  for (const auto& n : neighbors) {
    if (!std::isfinite(n.distance) || n.distance < 0.0f) {
      throw std::invalid_argument("neighbor distance must be finite and nonnegative");
    }
    min_d = std::min(min_d, static_cast<double>(n.distance));
  }
  std::map<TokenId, double> weights;
  double total = 0.0;
  for (const auto& n : neighbors) {
    const double w = std::exp(-(static_cast<double>(n.distance) - min_d) / tau);
    weights[n.token] += w;
    total += w;
  }
  TeacherDistribution out;
  out.support.reserve(weights.size());
  for (auto [t, w] : weights) {
    if (w > 0.0) out.support.emplace_back(t, w / total);
  }
  return out;
}

double clamped_log(double p, std::size_t& clamped) {
  if (p < nmt::kProbFloor) {
    ++clamped;
    p = nmt::kProbFloor;
  }
  return std::log(p);
}

}  // namespace

TeacherDistribution teacher_from_neighbors(std::span<const knn::StoredNeighbor> neighbors, double tau) {
  return teacher_impl(neighbors, tau);
}

TeacherDistribution teacher_from_neighbors(const knn::NeighborSet& neighbors, double tau) {
  return teacher_impl(neighbors, tau);
}

LossValue knn_kd_loss(std::span<const double> student, const TeacherDistribution& teacher) {
  LossValue out;
  for (auto [t, p] : teacher.support) {
    if (t >= student.size()) throw std::out_of_range("teacher token outside student vocabulary");
    out.value -= p * clamped_log(student[t], out.clamped);
  }
  return out;
}

LossValue combined_loss(std::span<const double> student, TokenId target,
                        const TeacherDistribution& teacher, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0,1]");
  if (target >= student.size()) throw std::out_of_range("target outside student vocabulary");
  LossValue kd = knn_kd_loss(student, teacher);
  std::size_t clamped = kd.clamped;
  const double ce = -clamped_log(student[target], clamped);
  return {(1.0 - alpha) * ce + alpha * kd.value, clamped};
}

void combined_grad_logits(std::span<const double> student, TokenId target,
                          const TeacherDistribution& teacher, double alpha, std::span<double> out) {
  if (out.size() != student.size()) throw std::invalid_argument("gradient row size mismatch");
  if (target >= student.size()) throw std::out_of_range("target outside student vocabulary");
  std::copy(student.begin(), student.end(), out.begin());
  out[target] -= 1.0 - alpha;
  for (auto [t, p] : teacher.support) {
    if (t >= out.size()) throw std::out_of_range("teacher token outside student vocabulary");
    out[t] -= alpha * p;
  }
}

std::vector<double> combined_grad_logits(std::span<const double> student, TokenId target,
                                         const TeacherDistribution& teacher, double alpha) {
  std::vector<double> out(student.size());
  combined_grad_logits(student, target, teacher, alpha, out);
  return out;
}

LossValue generic_kd_loss(std::span<const double> student, std::span<const double> teacher) {
  if (student.size() != teacher.size()) throw std::invalid_argument("distribution sizes differ");
  LossValue out;
  for (std::size_t y = 0; y < teacher.size(); ++y) {
    if (teacher[y] == 0.0) continue;
    out.value -= teacher[y] * clamped_log(student[y], out.clamped);
  }
  return out;
}

nmt::PositionLoss knn_kd_position_loss(const knn::NeighborFile& neighbors,
                                       const corpus::ParallelCorpus& corpus,
                                       const DistillConfig& config) {
  config.validate();
  auto offsets = std::make_shared<std::vector<std::size_t>>(corpus.target_offsets());
  if (offsets->back() != neighbors.count()) {
    throw io::IncompatibleArtifact("neighbor file has " + std::to_string(neighbors.count()) +
                                   " records but the corpus has " + std::to_string(offsets->back()) +
                                   " target tokens");
  }
  const std::size_t k = std::min(config.k, neighbors.k());
  const double tau = config.tau, alpha = config.alpha;
  return [&neighbors, offsets, k, tau, alpha](std::size_t pair, std::size_t position,
                                               std::span<const double> probs, TokenId target,
                                               std::span<double> grad) {
    auto record = neighbors.record((*offsets)[pair] + position).first(k);
    auto teacher = teacher_from_neighbors(record, tau);
    combined_grad_logits(probs, target, teacher, alpha, grad);
    return combined_loss(probs, target, teacher, alpha);
  };
}

}  // namespace knnkd::distill
