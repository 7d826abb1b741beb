// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "knnkd/corpus.h"
#include "knnkd/knn.h"
#include "knnkd/model.h"
#include "knnkd/neighbor_file.h"
#include "knnkd/train.h"

namespace knnkd::distill {

using corpus::TokenId;
using nmt::LossValue;

struct DistillConfig {
  double tau = 100.0;   // kernel temperature on retrieval distances
  double alpha = 0.5;   // weight of the distillation term
  std::size_t k = 64;   // neighbors used per position (a prefix of the stored set)

  void validate() const;
};

/// Sparse distribution over the retrieved tokens; zero elsewhere.
struct TeacherDistribution {
  std::vector<std::pair<TokenId, double>> support;  // ascending token id

  double prob(TokenId token) const;
  std::vector<double> dense(std::size_t vocab_size) const;
};

/// p(y) ∝ Σ_j [v_j = y] exp(-d_j / tau), max-shifted. Repeated tokens merge.
TeacherDistribution teacher_from_neighbors(std::span<const knn::StoredNeighbor> neighbors, double tau);
TeacherDistribution teacher_from_neighbors(const knn::NeighborSet& neighbors, double tau);

/// -Σ_{y in support} p_T(y) log p_S(y); only the support is visited.
LossValue knn_kd_loss(std::span<const double> student, const TeacherDistribution& teacher);

/// (1 - alpha) * CE(target) + alpha * knn_kd_loss.
LossValue combined_loss(std::span<const double> student, TokenId target,
                        const TeacherDistribution& teacher, double alpha);

/// dLoss/dlogits of combined_loss composed with softmax:
///   p(y) - (1 - alpha) [y = target] - alpha p_T(y)
void combined_grad_logits(std::span<const double> student, TokenId target,
                          const TeacherDistribution& teacher, double alpha, std::span<double> out);
std::vector<double> combined_grad_logits(std::span<const double> student, TokenId target,
                                         const TeacherDistribution& teacher, double alpha);

/// Dense cross-entropy -Σ_y p_T(y) log p_S(y) over the whole vocabulary.
LossValue generic_kd_loss(std::span<const double> student, std::span<const double> teacher);

/// Training loss that reads each position's neighbors from `neighbors`
/// (rows aligned with `corpus` in datastore order) and builds the teacher on
/// the fly.
nmt::PositionLoss knn_kd_position_loss(const knn::NeighborFile& neighbors,
                                       const corpus::ParallelCorpus& corpus,
                                       const DistillConfig& config);

}  // namespace knnkd::distill
