// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/knn.h"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "knnkd/random.h"

namespace knnkd::knn {

void SearchConfig::validate() const {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (ivf && (ivf->num_clusters == 0 || ivf->num_probes == 0)) {
    throw std::invalid_argument("inverted-file index needs clusters and probes");
  }
}

namespace {

struct Scored {
  double distance;
  std::uint64_t index;
  bool operator<(const Scored& o) const {
    return distance != o.distance ? distance < o.distance : index < o.index;
  }
};

double squared_distance(std::span<const float> key, std::span<const float> query) {
  double acc = 0.0;
  for (std::size_t c = 0; c < key.size(); ++c) {
    const double d = static_cast<double>(key[c]) - static_cast<double>(query[c]);
    acc += d * d;
  }
  return acc;
}

// Keeps the k smallest (distance, index) pairs seen so far.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}
  void offer(double distance, std::uint64_t index) {
    Scored s{distance, index};
    if (heap_.size() < k_) {
      heap_.push(s);
    } else if (s < heap_.top()) {
      heap_.pop();
      heap_.push(s);
    }
  }
  double bound() const { return heap_.size() < k_ ? INFINITY : heap_.top().distance; }
  NeighborSet finish(const store::Datastore& ds, Metric metric) {
    std::vector<Scored> items;
    items.reserve(heap_.size());
    while (!heap_.empty()) {
      items.push_back(heap_.top());
      heap_.pop();
    }
    std::sort(items.begin(), items.end());
    NeighborSet out;
    out.reserve(items.size());
    for (const auto& s : items) {
      const double d = metric == Metric::l2 ? std::sqrt(s.distance) : s.distance;
      out.push_back({s.index, static_cast<float>(d), ds.values()[s.index]});
    }
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<Scored> heap_;
};

void check_query(const store::Datastore& ds, std::span<const float> query, std::size_t k) {
  if (query.size() != ds.dim()) {
    throw std::invalid_argument("query dim " + std::to_string(query.size()) +
                                " does not match datastore dim " + std::to_string(ds.dim()));
  }
  if (k < 1) throw std::invalid_argument("k must be >= 1");
}

}  // namespace

ExactIndex::ExactIndex(const store::Datastore& ds) : ds_(ds) {
  if (ds.empty()) throw std::invalid_argument("empty datastore");
}

NeighborSet ExactIndex::search(std::span<const float> query, std::size_t k, Metric metric) const {
  check_query(ds_, query, k);
  TopK top(k);
  const std::size_t dim = ds_.dim();
  const float* keys = ds_.keys().data();
  for (std::size_t j = 0; j < ds_.count(); ++j) {
    top.offer(squared_distance({keys + j * dim, dim}, query), j);
  }
  return top.finish(ds_, metric);
}

IvfIndex::IvfIndex(const store::Datastore& ds, const IvfParams& params) : ds_(ds), params_(params) {
  if (ds.empty()) throw std::invalid_argument("empty datastore");
  const std::size_t dim = ds.dim();
  const std::size_t nc = std::min(params.num_clusters, ds.count());
  if (nc == 0) throw std::invalid_argument("num_clusters must be positive");

  // k-means, initialized from distinct random rows
  Rng rng(params.seed);
  std::vector<std::uint64_t> rows(ds.count());
  for (std::size_t j = 0; j < rows.size(); ++j) rows[j] = j;
  rng.shuffle(rows);
  centroids_.assign(nc * dim, 0.0);
  for (std::size_t c = 0; c < nc; ++c) {
    auto key = ds.key(rows[c]);
    std::copy(key.begin(), key.end(), centroids_.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }
  std::vector<std::size_t> assign(ds.count(), 0);
  auto nearest = [&](std::span<const float> key) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < nc; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        const double d = centroids_[c * dim + i] - key[i];
        acc += d * d;
      }
      if (acc < best_d) {
        best_d = acc;
        best = c;
      }
    }
    return best;
  };
  for (std::size_t it = 0; it < std::max<std::size_t>(1, params.train_iterations); ++it) {
    for (std::size_t j = 0; j < ds.count(); ++j) assign[j] = nearest(ds.key(j));
    std::vector<double> sums(nc * dim, 0.0);
    std::vector<std::size_t> counts(nc, 0);
    for (std::size_t j = 0; j < ds.count(); ++j) {
      auto key = ds.key(j);
      ++counts[assign[j]];
      for (std::size_t i = 0; i < dim; ++i) sums[assign[j] * dim + i] += key[i];
    }
    for (std::size_t c = 0; c < nc; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t i = 0; i < dim; ++i) {
        centroids_[c * dim + i] = sums[c * dim + i] / static_cast<double>(counts[c]);
      }
    }
  }
  for (std::size_t j = 0; j < ds.count(); ++j) assign[j] = nearest(ds.key(j));
  lists_.assign(nc, {});
  for (std::size_t j = 0; j < ds.count(); ++j) lists_[assign[j]].push_back(j);
}

NeighborSet IvfIndex::search(std::span<const float> query, std::size_t k, Metric metric) const {
  check_query(ds_, query, k);
  const std::size_t dim = ds_.dim();
  const std::size_t nc = lists_.size();
  std::vector<Scored> cd(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = centroids_[c * dim + i] - query[i];
      acc += d * d;
    }
    cd[c] = {acc, c};
  }
  std::sort(cd.begin(), cd.end());
  TopK top(k);
  const float* keys = ds_.keys().data();
  const std::size_t wanted = std::min(k, ds_.count());
  std::size_t scanned = 0;
  // keep probing past num_probes until k candidates have been seen
  for (std::size_t p = 0; p < nc && (p < params_.num_probes || scanned < wanted); ++p) {
    for (std::uint64_t j : lists_[cd[p].index]) {
      top.offer(squared_distance({keys + j * dim, dim}, query), j);
      ++scanned;
    }
  }
  return top.finish(ds_, metric);
}

std::unique_ptr<Index> make_index(const store::Datastore& ds, const SearchConfig& config) {
  config.validate();
  if (config.ivf) return std::make_unique<IvfIndex>(ds, *config.ivf);
  return std::make_unique<ExactIndex>(ds);
}

NeighborSet search(const store::Datastore& ds, std::span<const float> query, const SearchConfig& config) {
  return make_index(ds, config)->search(query, config.k, config.metric);
}

std::vector<float> to_query(std::span<const double> hidden) {
  std::vector<float> q(hidden.size());
  for (std::size_t i = 0; i < hidden.size(); ++i) q[i] = static_cast<float>(hidden[i]);
  return q;
}

double recall_at_k(std::span<const NeighborSet> approx, std::span<const NeighborSet> exact) {
  if (approx.size() != exact.size()) throw std::invalid_argument("recall: query count mismatch");
  if (exact.empty()) return 1.0;
  double total = 0.0;
  for (std::size_t q = 0; q < exact.size(); ++q) {
    if (exact[q].empty()) {
      total += 1.0;
      continue;
    }
    std::unordered_set<std::uint64_t> truth;
    for (const auto& n : exact[q]) truth.insert(n.index);
    std::size_t hit = 0;
    for (const auto& n : approx[q]) hit += truth.count(n.index);
    total += static_cast<double>(hit) / static_cast<double>(truth.size());
  }
  return total / static_cast<double>(exact.size());
}

}  // namespace knnkd::knn
