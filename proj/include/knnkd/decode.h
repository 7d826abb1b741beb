// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "knnkd/model.h"

namespace knnkd::nmt {

struct Hypothesis {
  corpus::Sequence tokens;  // without BOS and EOS
  bool finished = false;    // ended with EOS
  double log_prob = 0.0;
  double score = 0.0;       // log_prob / generated length (EOS counted)

  std::size_t generated_length() const { return tokens.size() + (finished ? 1 : 0); }
};

/// Rewrites one beam entry's next-token distribution in place.
using StepTransform = std::function<void(const DecoderStep& step, std::vector<double>& probs)>;

/// Beam search with length-normalized scores. beam_size 1 is greedy
/// decoding. Each step keeps the best `beam_size` expansions by cumulative
/// log-probability (ties: lower beam rank, then lower token id); expansions
/// ending in EOS retire. Search stops once `beam_size` hypotheses have
/// retired, no live beam remains, or `max_len` tokens were generated.
Hypothesis beam_search(const Model& model, std::span<const TokenId> source, std::size_t beam_size,
                       std::size_t max_len, const StepTransform& transform = {});

inline Hypothesis decode(const Model& model, std::span<const TokenId> source,
                         std::size_t beam_size, std::size_t max_len) {
  return beam_search(model, source, beam_size, max_len);
}

}  // namespace knnkd::nmt
