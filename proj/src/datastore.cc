// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/datastore.h"

#include <atomic>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>

namespace knnkd::store {

namespace {
constexpr char kMagic[4] = {'K', 'N', 'D', 'S'};
constexpr std::size_t kHeaderBytes = 40;
constexpr std::size_t kCrcOffset = 32;

struct BlockSizes {
  std::size_t keys, values, provenance;
  std::size_t total() const { return kHeaderBytes + keys + values + provenance; }
};

BlockSizes block_sizes(std::size_t count, std::size_t dim) {
  return {io::align_up(count * dim * sizeof(float), 8), io::align_up(count * sizeof(TokenId), 8),
          count * sizeof(Provenance)};
}
}  // namespace

Datastore::Datastore(std::size_t dim, std::uint32_t tgt_vocab_size, std::uint64_t fingerprint,
                     std::vector<float> keys, std::vector<TokenId> values,
                     std::vector<Provenance> provenance)
    : dim_(dim),
      count_(values.size()),
      tgt_vocab_size_(tgt_vocab_size),
      fingerprint_(fingerprint),
      owned_keys_(std::move(keys)),
      owned_values_(std::move(values)),
      owned_provenance_(std::move(provenance)) {
  if (dim_ == 0) throw std::invalid_argument("datastore dim must be positive");
  if (owned_keys_.size() != count_ * dim_ || owned_provenance_.size() != count_) {
    throw std::invalid_argument("datastore blocks have inconsistent sizes");
  }
  keys_ = owned_keys_;
  values_ = owned_values_;
  provenance_ = owned_provenance_;
}

std::vector<std::byte> Datastore::serialize() const {
  io::BinaryWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint32_t>(kDatastoreVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim_));
  w.put<std::uint32_t>(tgt_vocab_size_);
  w.put<std::uint64_t>(count_);
  w.put<std::uint64_t>(fingerprint_);
  w.put<std::uint32_t>(0);  // crc, patched below
  w.put<std::uint32_t>(0);
  w.put_array(keys_);
  w.pad_to(8);
  w.put_array(values_);
  w.pad_to(8);
  w.put_array(provenance_);
  auto crc = io::crc32(w.bytes().subspan(kHeaderBytes));
  w.patch<std::uint32_t>(kCrcOffset, crc);
  return w.release();
}

void Datastore::save(const std::filesystem::path& path) const { io::write_file(path, serialize()); }

Datastore Datastore::load(const std::filesystem::path& path) {
  using io::FormatError;
  io::MappedFile file(path);
  auto bytes = file.bytes();
  io::ByteReader r(bytes);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(FormatError::Kind::bad_magic, "not a datastore file");
  auto version = r.get<std::uint32_t>();
  if (version != kDatastoreVersion) {
    throw FormatError(FormatError::Kind::version_mismatch,
                      "datastore version " + std::to_string(version) + " unsupported");
  }
  Datastore ds;
  ds.dim_ = r.get<std::uint32_t>();
  ds.tgt_vocab_size_ = r.get<std::uint32_t>();
  ds.count_ = r.get<std::uint64_t>();
  ds.fingerprint_ = r.get<std::uint64_t>();
  auto crc = r.get<std::uint32_t>();
  r.get<std::uint32_t>();
  if (ds.dim_ == 0) throw FormatError(FormatError::Kind::inconsistent, "datastore dim is zero");

  const auto sizes = block_sizes(ds.count_, ds.dim_);
  if (bytes.size() < sizes.total()) throw FormatError(FormatError::Kind::truncated, "truncated file");
  if (bytes.size() > sizes.total()) {
    throw FormatError(FormatError::Kind::inconsistent, "datastore file has trailing bytes");
  }
  if (io::crc32(bytes.subspan(kHeaderBytes)) != crc) {
    throw FormatError(FormatError::Kind::checksum_mismatch, "datastore checksum mismatch");
  }
  const std::byte* base = bytes.data() + kHeaderBytes;
  ds.keys_ = {reinterpret_cast<const float*>(base), ds.count_ * ds.dim_};
  ds.values_ = {reinterpret_cast<const TokenId*>(base + sizes.keys), ds.count_};
  ds.provenance_ = {reinterpret_cast<const Provenance*>(base + sizes.keys + sizes.values), ds.count_};
  ds.mapped_ = std::move(file);
  return ds;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next.store(n);
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

Datastore build_datastore(const nmt::Model& model, const corpus::ParallelCorpus& corpus,
                          std::size_t threads) {
  const auto& cfg = model.config();
  if (corpus.tgt_vocab_size != cfg.tgt_vocab_size || corpus.src_vocab_size != cfg.src_vocab_size) {
    throw std::invalid_argument("corpus vocabulary does not match the checkpoint");
  }
  corpus.validate();
  const std::size_t dim = cfg.hidden_dim;
  const auto offsets = corpus.target_offsets();
  const std::size_t count = offsets.back();
  std::vector<float> keys(count * dim);
  std::vector<TokenId> values(count);
  std::vector<Provenance> prov(count);

  parallel_for(corpus.pairs.size(), threads, [&](std::size_t s) {
    const auto& pair = corpus.pairs[s];
    auto pass = nmt::teacher_forced(model, pair.source, pair.target);
    for (std::size_t i = 0; i < pair.target.size(); ++i) {
      const std::size_t row = offsets[s] + i;
      const auto& q = pass.steps[i].output_hidden;
      for (std::size_t c = 0; c < dim; ++c) keys[row * dim + c] = static_cast<float>(q[c]);
      values[row] = pair.target[i];
      prov[row] = {static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(i)};
    }
  });
  return Datastore(dim, cfg.tgt_vocab_size, model.fingerprint(), std::move(keys), std::move(values),
                   std::move(prov));
}

}  // namespace knnkd::store
