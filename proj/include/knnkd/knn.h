// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "knnkd/datastore.h"

namespace knnkd::knn {

using corpus::TokenId;

enum class Metric : std::uint32_t { squared_l2 = 0, l2 = 1 };

struct IvfParams {
  std::size_t num_clusters = 64;
  std::size_t num_probes = 8;
  std::size_t train_iterations = 10;
  std::uint64_t seed = 1;
};

struct SearchConfig {
  std::size_t k = 8;
  Metric metric = Metric::squared_l2;
  std::optional<IvfParams> ivf;  // exact search when unset

  void validate() const;
};

struct Neighbor {
  std::uint64_t index;  // datastore row
  float distance;
  TokenId token;
  bool operator==(const Neighbor&) const = default;
};

/// Ascending by distance, ties by ascending datastore row.
using NeighborSet = std::vector<Neighbor>;

class Index {
 public:
  virtual ~Index() = default;
  /// Throws on dimension mismatch.
  virtual NeighborSet search(std::span<const float> query, std::size_t k, Metric metric) const = 0;
  virtual const store::Datastore& datastore() const = 0;
};

/// Full scan. Distances accumulate in double from the f32 keys and are
/// rounded to f32 only in the result.
class ExactIndex : public Index {
 public:
  /// Throws on an empty datastore. The datastore must outlive the index.
  explicit ExactIndex(const store::Datastore& ds);
  NeighborSet search(std::span<const float> query, std::size_t k, Metric metric) const override;
  const store::Datastore& datastore() const override { return ds_; }

 private:
  const store::Datastore& ds_;
};

/// Inverted-file index: k-means coarse quantizer, exact scan inside the
/// `num_probes` clusters nearest to the query (more are probed if those
/// hold fewer than k rows).
class IvfIndex : public Index {
 public:
  IvfIndex(const store::Datastore& ds, const IvfParams& params);
  NeighborSet search(std::span<const float> query, std::size_t k, Metric metric) const override;
  const store::Datastore& datastore() const override { return ds_; }

  std::size_t num_clusters() const { return lists_.size(); }

 private:
  const store::Datastore& ds_;
  IvfParams params_;
  std::vector<double> centroids_;                  // num_clusters x dim
  std::vector<std::vector<std::uint64_t>> lists_;  // rows per cluster, ascending
};

std::unique_ptr<Index> make_index(const store::Datastore& ds, const SearchConfig& config);

/// Single query convenience wrapper (builds the index on each call).
NeighborSet search(const store::Datastore& ds, std::span<const float> query, const SearchConfig& config);

std::vector<float> to_query(std::span<const double> hidden);

/// Mean over queries of |approx ∩ exact| / |exact| on datastore rows.
double recall_at_k(std::span<const NeighborSet> approx, std::span<const NeighborSet> exact);

}  // namespace knnkd::knn
