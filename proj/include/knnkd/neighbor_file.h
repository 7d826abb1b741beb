// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "knnkd/datastore.h"
#include "knnkd/io.h"
#include "knnkd/knn.h"
#include "knnkd/model.h"

namespace knnkd::knn {

/// One retrieved (distance, token) pair as stored on disk.
struct StoredNeighbor {
  float distance;
  TokenId token;
  bool operator==(const StoredNeighbor&) const = default;
};
static_assert(sizeof(StoredNeighbor) == 8);

inline constexpr std::uint32_t kNeighborFileVersion = 1;

/// Precomputed neighbor sets for every training position, in datastore row
/// order. Each record holds exactly k entries.
///
/// File layout (little-endian):
///   0  "KNNB"      4  version u32       8  k u32       12 metric u32
///   16 count u64   24 fingerprint u64   32 crc32 u32   36 reserved u32
///   40 count records of k x {f32 distance, u32 token}
/// The CRC-32 covers the records.
class NeighborFile {
 public:
  NeighborFile(std::size_t k, Metric metric, std::uint64_t fingerprint,
               std::vector<StoredNeighbor> entries);
  static NeighborFile load(const std::filesystem::path& path);

  NeighborFile(NeighborFile&&) noexcept = default;
  NeighborFile& operator=(NeighborFile&&) noexcept = default;
  NeighborFile(const NeighborFile&) = delete;
  NeighborFile& operator=(const NeighborFile&) = delete;

  std::vector<std::byte> serialize() const;
  void save(const std::filesystem::path& path) const;

  std::size_t k() const { return k_; }
  std::size_t count() const { return count_; }
  Metric metric() const { return metric_; }
  std::uint64_t fingerprint() const { return fingerprint_; }
  std::span<const StoredNeighbor> record(std::size_t row) const {
    return entries_.subspan(row * k_, k_);
  }

 private:
  NeighborFile() = default;

  std::size_t k_ = 0;
  std::size_t count_ = 0;
  Metric metric_ = Metric::squared_l2;
  std::uint64_t fingerprint_ = 0;
  std::vector<StoredNeighbor> owned_;
  io::MappedFile mapped_;
  std::span<const StoredNeighbor> entries_;
};

/// Queries the datastore with every teacher-forced training context of
/// `corpus` (the query's own entry included). `model` must be the checkpoint
/// the datastore was built from.
NeighborFile batch_search_training_set(const store::Datastore& ds, const nmt::Model& model,
                                       const corpus::ParallelCorpus& corpus,
                                       const SearchConfig& config, std::size_t threads = 1);

}  // namespace knnkd::knn
