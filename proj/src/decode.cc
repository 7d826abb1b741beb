// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/decode.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace knnkd::nmt {

namespace {

struct Beam {
  corpus::Sequence tokens;
  std::vector<double> state;
  double log_prob = 0.0;
};

struct Candidate {
  std::size_t beam;
  TokenId token;
  double log_prob;
};

}  // namespace

Hypothesis beam_search(const Model& model, std::span<const TokenId> source, std::size_t beam_size,
                       std::size_t max_len, const StepTransform& transform) {
  if (beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  const auto enc = encode_source(model, source);

  std::vector<Beam> live(1);
  live[0].state.assign(enc.last().begin(), enc.last().end());
  std::vector<Hypothesis> done;
  std::vector<Candidate> candidates;
  std::vector<DecoderStep> steps;

  for (std::size_t t = 1; t <= max_len && !live.empty(); ++t) {
    candidates.clear();
    steps.clear();
    for (std::size_t b = 0; b < live.size(); ++b) {
      const TokenId prev = live[b].tokens.empty() ? corpus::kBos : live[b].tokens.back();
      steps.push_back(decoder_step(model, enc, live[b].state, prev));
      auto probs = softmax(steps.back().logits);
      if (transform) transform(steps.back(), probs);
      for (std::size_t y = 0; y < probs.size(); ++y) {
        if (!(probs[y] > 0.0)) continue;
        candidates.push_back({b, static_cast<TokenId>(y), live[b].log_prob + std::log(probs[y])});
      }
    }
    // top 2*beam so that beam live hypotheses survive even when some end here
    const std::size_t keep = std::min(2 * beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Beam> next;
    for (std::size_t c = 0; c < keep && next.size() < beam_size; ++c) {
      const Candidate& cand = candidates[c];
      const Beam& parent = live[cand.beam];
      if (cand.token == corpus::kEos) {
        if (c < beam_size) {
          done.push_back({parent.tokens, true, cand.log_prob, cand.log_prob / static_cast<double>(t)});
        }
        continue;
      }
      Beam nb{parent.tokens, steps[cand.beam].state, cand.log_prob};
      nb.tokens.push_back(cand.token);
      next.push_back(std::move(nb));
    }
    live = std::move(next);
    if (done.size() >= beam_size) {
      live.clear();
      break;
    }
  }
  // anything still live was cut off by max_len
  for (auto& b : live) {
    const auto len = static_cast<double>(b.tokens.size());
    done.push_back({std::move(b.tokens), false, b.log_prob, b.log_prob / len});
  }
  if (done.empty()) throw std::runtime_error("beam search produced no hypothesis");
  auto best = std::max_element(done.begin(), done.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.score < b.score;
  });
  return *best;
}

}  // namespace knnkd::nmt
