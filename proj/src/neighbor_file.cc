// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/neighbor_file.h"

#include <stdexcept>
#include <string>

namespace knnkd::knn {

namespace {
constexpr char kMagic[4] = {'K', 'N', 'N', 'B'};
constexpr std::size_t kHeaderBytes = 40;
constexpr std::size_t kCrcOffset = 32;
}  // namespace

NeighborFile::NeighborFile(std::size_t k, Metric metric, std::uint64_t fingerprint,
                           std::vector<StoredNeighbor> entries)
    : k_(k), metric_(metric), fingerprint_(fingerprint), owned_(std::move(entries)) {
  if (k_ == 0) throw std::invalid_argument("neighbor file k must be positive");
  if (owned_.size() % k_ != 0) throw std::invalid_argument("neighbor entries not a multiple of k");
  count_ = owned_.size() / k_;
  entries_ = owned_;
}

std::vector<std::byte> NeighborFile::serialize() const {
  io::BinaryWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint32_t>(kNeighborFileVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(k_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(metric_));
  w.put<std::uint64_t>(count_);
  w.put<std::uint64_t>(fingerprint_);
  w.put<std::uint32_t>(0);
  w.put<std::uint32_t>(0);
  w.put_array(entries_);
  w.patch<std::uint32_t>(kCrcOffset, io::crc32(w.bytes().subspan(kHeaderBytes)));
  return w.release();
}

void NeighborFile::save(const std::filesystem::path& path) const { io::write_file(path, serialize()); }

NeighborFile NeighborFile::load(const std::filesystem::path& path) {
  using io::FormatError;
  io::MappedFile file(path);
  auto bytes = file.bytes();
  io::ByteReader r(bytes);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(FormatError::Kind::bad_magic, "not a neighbor file");
  auto version = r.get<std::uint32_t>();
  if (version != kNeighborFileVersion) {
    throw FormatError(FormatError::Kind::version_mismatch,
                      "neighbor file version " + std::to_string(version) + " unsupported");
  }
  NeighborFile nf;
  nf.k_ = r.get<std::uint32_t>();
  auto metric = r.get<std::uint32_t>();
  if (metric > 1) throw FormatError(FormatError::Kind::inconsistent, "unknown metric");
  nf.metric_ = static_cast<Metric>(metric);
  nf.count_ = r.get<std::uint64_t>();
  nf.fingerprint_ = r.get<std::uint64_t>();
  auto crc = r.get<std::uint32_t>();
  r.get<std::uint32_t>();
  if (nf.k_ == 0) throw FormatError(FormatError::Kind::inconsistent, "neighbor file k is zero");
  const std::size_t expected = kHeaderBytes + nf.count_ * nf.k_ * sizeof(StoredNeighbor);
  if (bytes.size() < expected) throw FormatError(FormatError::Kind::truncated, "truncated file");
  if (bytes.size() > expected) throw FormatError(FormatError::Kind::inconsistent, "neighbor file has trailing bytes");
  if (io::crc32(bytes.subspan(kHeaderBytes)) != crc) {
    throw FormatError(FormatError::Kind::checksum_mismatch, "neighbor file checksum mismatch");
  }
  nf.entries_ = {reinterpret_cast<const StoredNeighbor*>(bytes.data() + kHeaderBytes), nf.count_ * nf.k_};
  nf.mapped_ = std::move(file);
  return nf;
}

NeighborFile batch_search_training_set(const store::Datastore& ds, const nmt::Model& model,
                                       const corpus::ParallelCorpus& corpus,
                                       const SearchConfig& config, std::size_t threads) {
  config.validate();
  if (model.fingerprint() != ds.fingerprint()) {
    throw io::IncompatibleArtifact("checkpoint fingerprint does not match the datastore's");
  }
  const auto offsets = corpus.target_offsets();
  if (offsets.back() != ds.count()) {
    throw io::IncompatibleArtifact("corpus token count " + std::to_string(offsets.back()) +
                                   " does not match datastore count " + std::to_string(ds.count()));
  }
  auto index = make_index(ds, config);
  const std::size_t k = std::min(config.k, ds.count());
  std::vector<StoredNeighbor> entries(ds.count() * k);

  store::parallel_for(corpus.pairs.size(), threads, [&](std::size_t s) {
    const auto& pair = corpus.pairs[s];
    auto pass = nmt::teacher_forced(model, pair.source, pair.target);
    for (std::size_t i = 0; i < pair.target.size(); ++i) {
      auto query = to_query(pass.steps[i].output_hidden);
      auto found = index->search(query, k, config.metric);
      StoredNeighbor* dst = entries.data() + (offsets[s] + i) * k;
      for (std::size_t j = 0; j < found.size(); ++j) dst[j] = {found[j].distance, found[j].token};
    }
  });
  return NeighborFile(k, config.metric, ds.fingerprint(), std::move(entries));
}

}  // namespace knnkd::knn
