// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/knnmt.h"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "knnkd/distill.h"

namespace knnkd::knnmt {

void InterpConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0,1]");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
}

std::vector<double> knnmt_step(std::span<const double> model_probs,
                               std::span<const double> step_hidden, const knn::Index& index,
                               const InterpConfig& config, std::size_t* searches) {
  config.validate();
  std::vector<double> out(model_probs.begin(), model_probs.end());
  if (config.lambda == 0.0) return out;
  if (index.datastore().empty()) throw std::invalid_argument("empty datastore");

  auto neighbors = index.search(knn::to_query(step_hidden), config.k, config.metric);
  if (searches != nullptr) ++*searches;
  auto knn_dist = distill::teacher_from_neighbors(neighbors, config.tau);
  const double keep = 1.0 - config.lambda;
  for (double& p : out) p *= keep;
  for (auto [t, p] : knn_dist.support) {
    if (t >= out.size()) throw std::out_of_range("retrieved token outside model vocabulary");
    out[t] += config.lambda * p;
  }
  return out;
}

KnnmtResult knnmt_decode(const nmt::Model& model, const knn::Index& index,
                         std::span<const nmt::TokenId> source, std::size_t beam_size,
                         const InterpConfig& config, std::size_t max_len) {
  config.validate();
  if (index.datastore().empty()) throw std::invalid_argument("empty datastore");
  KnnmtResult result;
  nmt::StepTransform transform = [&](const nmt::DecoderStep& step, std::vector<double>& probs) {
    ++result.steps;
    probs = knnmt_step(probs, step.output_hidden, index, config, &result.searches);
  };
  result.hypothesis = nmt::beam_search(model, source, beam_size, max_len, transform);
  return result;
}

}  // namespace knnkd::knnmt
