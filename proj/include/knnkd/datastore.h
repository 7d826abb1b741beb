// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "knnkd/corpus.h"
#include "knnkd/io.h"
#include "knnkd/model.h"

namespace knnkd::store {

using corpus::TokenId;

struct Provenance {
  std::uint32_t sentence;
  std::uint32_t position;
  bool operator==(const Provenance&) const = default;
};

inline constexpr std::uint32_t kDatastoreVersion = 1;

/// Immutable (key, value) table with one row per target token of the
/// training corpus. Keys are the model's output-layer inputs cast to f32.
///
/// File layout (little-endian, blocks 8-byte aligned):
///   0  "KNDS"         4  version u32      8  dim u32     12 tgt_vocab u32
///   16 count u64      24 fingerprint u64  32 crc32 u32   36 reserved u32
///   40 keys f32[count*dim] | values u32[count] | provenance {u32,u32}[count]
/// The CRC-32 covers everything after the header.
class Datastore {
 public:
  Datastore(std::size_t dim, std::uint32_t tgt_vocab_size, std::uint64_t fingerprint,
            std::vector<float> keys, std::vector<TokenId> values,
            std::vector<Provenance> provenance);

  /// Memory-maps `path`; keys and values are read in place.
  static Datastore load(const std::filesystem::path& path);

  Datastore(Datastore&&) noexcept = default;
  Datastore& operator=(Datastore&&) noexcept = default;
  Datastore(const Datastore&) = delete;
  Datastore& operator=(const Datastore&) = delete;

  std::vector<std::byte> serialize() const;
  void save(const std::filesystem::path& path) const;

  std::size_t dim() const { return dim_; }
  std::size_t count() const { return count_; }
  bool empty() const { return count_ == 0; }
  std::uint32_t tgt_vocab_size() const { return tgt_vocab_size_; }
  /// Fingerprint of the checkpoint the keys came from.
  std::uint64_t fingerprint() const { return fingerprint_; }

  std::span<const float> keys() const { return keys_; }
  std::span<const float> key(std::size_t j) const { return keys_.subspan(j * dim_, dim_); }
  std::span<const TokenId> values() const { return values_; }
  std::span<const Provenance> provenance() const { return provenance_; }

 private:
  Datastore() = default;

  std::size_t dim_ = 0;
  std::size_t count_ = 0;
  std::uint32_t tgt_vocab_size_ = 0;
  std::uint64_t fingerprint_ = 0;
  std::vector<float> owned_keys_;
  std::vector<TokenId> owned_values_;
  std::vector<Provenance> owned_provenance_;
  io::MappedFile mapped_;
  std::span<const float> keys_;
  std::span<const TokenId> values_;
  std::span<const Provenance> provenance_;
};

/// Runs the model teacher-forced over every pair and records one entry per
/// target token (EOS included), sentence-major. Work is split across
/// `threads` workers; the result does not depend on the thread count.
Datastore build_datastore(const nmt::Model& model, const corpus::ParallelCorpus& corpus,
                          std::size_t threads = 1);

/// Calls fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace knnkd::store
