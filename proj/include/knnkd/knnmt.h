// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "knnkd/decode.h"
#include "knnkd/knn.h"
#include "knnkd/model.h"

namespace knnkd::knnmt {

struct InterpConfig {
  double lambda = 0.5;
  std::size_t k = 8;
  double tau = 10.0;
  knn::Metric metric = knn::Metric::squared_l2;

  void validate() const;
};

/// (1 - lambda) p_MT + lambda p_kNN, with p_kNN from a fresh search on
/// `step_hidden`. lambda == 0 returns p_MT untouched and skips the search.
/// `searches`, when given, is incremented once per search.
std::vector<double> knnmt_step(std::span<const double> model_probs,
                               std::span<const double> step_hidden, const knn::Index& index,
                               const InterpConfig& config, std::size_t* searches = nullptr);

struct KnnmtResult {
  nmt::Hypothesis hypothesis;
  std::size_t searches = 0;
  std::size_t steps = 0;  // decoder steps across all beams
};

/// Beam search in which every beam expansion goes through knnmt_step.
KnnmtResult knnmt_decode(const nmt::Model& model, const knn::Index& index,
                         std::span<const nmt::TokenId> source, std::size_t beam_size,
                         const InterpConfig& config, std::size_t max_len);

}  // namespace knnkd::knnmt
